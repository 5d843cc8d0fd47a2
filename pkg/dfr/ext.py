# Utilities for command line use: logging setup, diagnostics and
# table output

from __future__ import annotations

import logging
import sys
import traceback
import types
import unicodedata
from typing import Any, TextIO


class _ExtraFormatter(logging.Formatter):
    "Appends any ``dfr_`` extra attributes of a record as key=value"

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        extra = sorted((k[4:], v) for k, v in record.__dict__.items() if k.startswith("dfr_"))
        if extra:
            text += " [" + " ".join(f"{ k }={ v }" for k, v in extra) + "]"
        return text


def configure_logging(level: int = logging.WARNING,
                      logger: logging.Logger | None = None,
                      *,
                      stream: TextIO | None = None,
                      show_extra: bool = False) -> logging.Handler:
    """Sends messages from this package to a stream

    Library code only logs.  Programs call this once to see the messages.

    :param level: Lowest `level <https://docs.python.org/3/library/logging.html#levels>`__ shown
    :param logger: Defaults to the package logger ``dfr``
    :param stream: Default ``sys.stderr``
    :param show_extra: Include the structured values attached to each message
    :returns: The installed handler so it can be removed again
    """
    logger = logger or logging.getLogger("dfr")
    handler = logging.StreamHandler(stream or sys.stderr)
    fmt = "%(levelname)s %(name)s: %(message)s"
    handler.setFormatter(_ExtraFormatter(fmt) if show_extra else logging.Formatter(fmt))
    logger.addHandler(handler)
    logger.setLevel(level)
    return handler


def print_augmented_traceback(exc_type: type[BaseException],
                              exc_value: BaseException,
                              exc_traceback: types.TracebackType,
                              *,
                              file: TextIO | None = None) -> None:
    """Prints a standard exception, but also includes the value of variables in each stack frame

    :param exc_type: The exception type
    :param exc_value: The exception value
    :param exc_traceback: Traceback for the exception
    :param file: (default ``sys.stderr``) Where the print goes

    .. code-block::

        try:
            ....
        except Exception as exc:
            dfr.ext.print_augmented_traceback(*sys.exc_info())
    """

    file = file or sys.stderr

    tbe = traceback.TracebackException(exc_type, exc_value, exc_traceback, capture_locals=True, compact=True)
    for line in tbe.format():
        print(line, file=file, end="")


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{ value:.6g}"
    if value is None:
        return "-"
    return str(value)


def _width(text: str) -> int:
    return len(text) + sum(1 if unicodedata.east_asian_width(c) == "W" else 0 for c in text)


def format_table(colnames: list[str], rows: list[list[Any]], *, use_unicode: bool = True,
                 colour: bool = False) -> str:
    """Formats rows as a box drawn table

    Numbers are right aligned, everything else left aligned.

    :param colour: Use ANSI escapes to make the header inverse
    """
    cells = [[_cell(v) for v in row] for row in rows]
    numeric = [all(isinstance(row[i], (int, float)) for row in rows) and bool(rows) for i in range(len(colnames))]
    widths = [max([_width(c)] + [_width(row[i]) for row in cells]) for i, c in enumerate(colnames)]

    def bar(chars: str) -> str:
        return chars[0] + chars[2].join(chars[1] * (w + 2) for w in widths) + chars[3]

    def line(values: list[str], sep: str, *, header: bool = False) -> str:
        out = []
        for i, v in enumerate(values):
            extra = " " * (widths[i] - _width(v))
            if header:
                text = " " + extra[:len(extra) // 2] + v + extra[len(extra) // 2:] + " "
                if colour:
                    text = "\x1b[7m\x1b[1m" + text + "\x1b[27m\x1b[22m"
            elif numeric[i]:
                text = " " + extra + v + " "
            else:
                text = " " + v + extra + " "
            out.append(text)
        return sep + sep.join(out) + sep

    sep = "│" if use_unicode else "|"
    out_lines = [bar("┌─┬┐" if use_unicode else "+-++"), line(colnames, sep, header=True)]
    if cells:
        out_lines.append(bar("├─┼┤" if use_unicode else "+-++"))
        out_lines += [line(row, sep) for row in cells]
    out_lines.append(bar("└─┴┘" if use_unicode else "+-++"))
    return "\n".join(out_lines) + "\n"
