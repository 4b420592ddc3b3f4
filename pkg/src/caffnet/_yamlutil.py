"""Line lookup for keys in YAML documents, used for error messages."""

from __future__ import annotations

import yaml


def line_index(node, prefix=(), out=None):
    """Map every key path in a composed node tree to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            line_index(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[prefix + (i,)] = v.start_mark.line + 1
            line_index(v, prefix + (i,), out)
    return out


def line_of(lines, path):
    """Line of the deepest prefix of ``path`` present in ``lines``, else None."""
    path = tuple(path or ())
    for k in range(len(path), 0, -1):
        if path[:k] in lines:
            return lines[path[:k]]
    return None


def yaml_error_line(exc):
    mark = getattr(exc, "problem_mark", None)
    return mark.line + 1 if mark is not None else None
