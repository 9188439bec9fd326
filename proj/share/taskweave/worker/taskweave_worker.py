#!/usr/bin/env python3
"""Persistent interpreter worker.

Reads newline-delimited JSON requests {cell_id, code, scope?, drop_scope?} on
stdin and answers on stdout with

    {"cell_id": ..., "stream": "stdout"|"stderr", "data": ...}   (zero or more)
    {"cell_id": ..., "done": true, "status": "ok"|"error"|"interrupted",
     "exception": {"kind", "message", "traceback"}?, "files": [...]}

An empty code string is a ping. Variables persist in one namespace across
requests; a named scope is a shallow copy of it made on first use.
"""
import ast
import builtins
import io
import json
import os
import sys
import traceback

PROTO = os.fdopen(os.dup(1), "w", encoding="utf-8", buffering=1)
os.dup2(2, 1)  # stray fd-1 writes from user code must not corrupt the frame stream

MAIN = {"__name__": "__main__", "__builtins__": builtins}
SCOPES = {}


def send(frame):
    PROTO.write(json.dumps(frame) + "\n")
    PROTO.flush()


class FrameWriter(io.TextIOBase):
    def __init__(self, cell_id, stream):
        self.cell_id, self.stream, self.buf = cell_id, stream, ""

    def writable(self):
        return True

    def write(self, text):
        self.buf += text
        if "\n" in self.buf or len(self.buf) > 4096:
            self.flush()
        return len(text)

    def flush(self):
        if self.buf:
            send({"cell_id": self.cell_id, "stream": self.stream, "data": self.buf})
            self.buf = ""


def snapshot():
    seen = {}
    for root, dirs, files in os.walk("."):
        dirs[:] = [d for d in dirs if not d.startswith(".") and d != "__pycache__"]
        for name in files:
            if name.startswith("."):
                continue
            path = os.path.normpath(os.path.join(root, name))
            try:
                seen[path] = os.stat(path).st_mtime_ns
            except OSError:
                pass
        if len(seen) > 2000:
            break
    return seen


def run_cell(cell_id, code, ns):
    filename = "<cell %s>" % cell_id
    tree = ast.parse(code, filename=filename, mode="exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        last = ast.Expression(tree.body.pop().value)
    exec(compile(tree, filename, "exec"), ns)
    if last is not None:
        value = eval(compile(last, filename, "eval"), ns)
        if value is not None:
            print(repr(value))


def handle(request):
    cell_id = request.get("cell_id", "")
    code = request.get("code", "")
    scope = request.get("scope")
    if not code:
        if scope is not None and request.get("drop_scope"):
            SCOPES.pop(scope, None)
        send({"cell_id": cell_id, "done": True, "status": "ok"})
        return
    ns = MAIN
    if scope is not None:
        ns = SCOPES.setdefault(scope, dict(MAIN))
    before = snapshot()
    out, err = FrameWriter(cell_id, "stdout"), FrameWriter(cell_id, "stderr")
    saved = sys.stdout, sys.stderr
    sys.stdout, sys.stderr = out, err
    status, exception = "ok", None
    try:
        run_cell(cell_id, code, ns)
    except BaseException as exc:  # noqa: BLE001 - everything is reported, nothing escapes
        status = "interrupted" if isinstance(exc, KeyboardInterrupt) else "error"
        tb = exc.__traceback__.tb_next if exc.__traceback__ is not None else None
        exception = {
            "kind": type(exc).__name__,
            "message": str(exc),
            "traceback": "".join(traceback.format_exception(type(exc), exc, tb)),
        }
    finally:
        out.flush()
        err.flush()
        sys.stdout, sys.stderr = saved
    if scope is not None and request.get("drop_scope"):
        SCOPES.pop(scope, None)
    after = snapshot()
    frame = {"cell_id": cell_id, "done": True, "status": status,
             "files": sorted(p for p, m in after.items() if before.get(p) != m)}
    if exception is not None:
        frame["exception"] = exception
    send(frame)


def main():
    while True:
        try:
            line = sys.stdin.readline()
        except KeyboardInterrupt:  # late interrupt that missed its cell
            continue
        if not line:
            return
        if not line.strip():
            continue
        try:
            request = json.loads(line)
        except ValueError:
            continue
        try:
            handle(request)
        except KeyboardInterrupt:
            send({"cell_id": request.get("cell_id", ""), "done": True, "status": "interrupted",
                  "exception": {"kind": "KeyboardInterrupt", "message": "", "traceback": ""}})


if __name__ == "__main__":
    main()
