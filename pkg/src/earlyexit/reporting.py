"""Output helpers: atomic file writes and the optional timestamp header."""

import contextlib
import csv
import datetime
import os
import tempfile


def timestamp_line():
    now = datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0)
    return f"# generated {now.isoformat()}\n"


@contextlib.contextmanager
def atomic_open(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename it into place on success.

    On any exception the temporary file is removed and ``path`` is untouched.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": "", "encoding": "utf-8"})) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp)
        raise


def read_csv_rows(path):
    """Rows of a CSV written by this package, skipping ``#`` comment lines."""
    with open(path, newline="", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))
