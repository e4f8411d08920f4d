"""File helpers: atomic writes and CSV output with round-trippable floats."""

import os
import tempfile


def fmt_real(x):
    return format(float(x), ".17g")


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows):
    """Render rows as CSV. Floats get 17 significant digits, ``None`` becomes empty."""
    out = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(fmt_real(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))
