import json
import os
import tempfile
from contextlib import contextmanager

from .errors import ValidationError


@contextmanager
def atomic_open(path, mode="w", encoding="utf-8", newline="\n"):
    """Write to a temp file next to ``path`` and rename over it on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        if "b" in mode:
            f = os.fdopen(fd, mode)
        else:
            f = os.fdopen(fd, mode, encoding=encoding, newline=newline)
        with f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_line(obj):
    return json.dumps(obj, separators=(", ", ": "), allow_nan=False)


def write_jsonl(path, rows):
    with atomic_open(path) as f:
        for row in rows:
            f.write(dump_line(row))
            f.write("\n")


def iter_jsonl(path):
    """Yield ``(line_number, obj)`` for every non-blank line."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            yield lineno, obj
