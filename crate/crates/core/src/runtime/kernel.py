"""Host-side helpers for the cellagent kernel.

Loaded once per interpreter. Everything stateful about a runtime lives in
Rust; this module only supplies the pieces that are awkward to express
through the C API: per-thread output routing, cell compilation with
last-expression splitting, error formatting and per-entry pickling.
"""

import ast
import builtins
import copy
import io
import keyword
import linecache
import pickle
import sys
import threading
import traceback
import types

_local = threading.local()


class CellTimeout(BaseException):
    """Raised asynchronously into a cell that exceeded its wall-clock budget."""


class _Capture:
    __slots__ = ("parts", "chars", "kept", "cap")

    def __init__(self, cap):
        self.parts = []
        self.chars = 0
        self.kept = 0
        self.cap = cap

    def write(self, s):
        n = len(s)
        self.chars += n
        if self.cap is None:
            self.parts.append(s)
        elif self.kept < self.cap:
            room = min(n, self.cap - self.kept)
            self.parts.append(s[:room])
            self.kept += room
        return n


class _Null:
    def write(self, s):
        return len(s)

    def flush(self):
        pass


class _Router(io.TextIOBase):
    def __init__(self, slot, fallback):
        self._slot = slot
        self._fallback = fallback if fallback is not None else _Null()

    def _target(self):
        stack = getattr(_local, self._slot, None)
        return stack[-1] if stack else None

    def write(self, s):
        if not isinstance(s, str):
            raise TypeError("write() argument must be str, not %s" % type(s).__name__)
        target = self._target()
        if target is None:
            return self._fallback.write(s)
        return target.write(s)

    def flush(self):
        if self._target() is None:
            self._fallback.flush()

    def writable(self):
        return True

    def isatty(self):
        return False

    @property
    def encoding(self):
        return getattr(self._fallback, "encoding", "utf-8")


def _install():
    if not isinstance(sys.stdout, _Router):
        sys.stdout = _Router("out", sys.stdout)
    if not isinstance(sys.stderr, _Router):
        sys.stderr = _Router("err", sys.stderr)


def push_capture(cap):
    _install()
    for slot in ("out", "err"):
        stack = getattr(_local, slot, None)
        if stack is None:
            stack = []
            setattr(_local, slot, stack)
        stack.append(_Capture(cap))


def pop_capture():
    out = _local.out.pop()
    err = _local.err.pop()
    return ("".join(out.parts), out.chars, "".join(err.parts), err.chars)


def thread_ident():
    return threading.get_ident()


def compile_cell(source, filename):
    tree = ast.parse(source, filename, "exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        expr = tree.body.pop()
        last = compile(ast.Expression(expr.value), filename, "eval")
    body = compile(tree, filename, "exec")
    return body, last


def format_error(exc, filename, source):
    linecache.cache[filename] = (len(source), None, source.splitlines(True), filename)
    te = traceback.TracebackException.from_exception(exc)
    message = str(exc)
    if isinstance(exc, SyntaxError):
        text = "".join(te.format_exception_only())
    else:
        text = "".join(te.format())
    return (type(exc).__name__, message, text.rstrip("\n"))


def is_identifier(name):
    return isinstance(name, str) and name.isidentifier() and not keyword.iskeyword(name)


def is_builtin_name(name):
    return hasattr(builtins, name)


def type_label(value):
    return type(value).__name__


def summarize(value, limit):
    try:
        text = repr(value)
    except Exception as exc:  # noqa: BLE001
        text = "<unrepresentable %s: %s>" % (type(value).__name__, exc)
    text = " ".join(text.split())
    if len(text) > limit:
        text = text[: max(limit - 3, 0)] + "..."
    return text


def dump_entry(value):
    """Return (type_tag, encoding, payload) or raise with a reason."""
    if isinstance(value, types.ModuleType):
        return (value.__name__, "module", value.__name__.encode("utf-8"))
    tag = "%s.%s" % (type(value).__module__, type(value).__qualname__)
    return (tag, "pickle", pickle.dumps(value, protocol=4))


def load_entry(encoding, payload):
    if encoding == "module":
        import importlib

        return importlib.import_module(payload.decode("utf-8"))
    return pickle.loads(payload)


def _identity_eq(value):
    return type(value).__eq__ is object.__eq__


def values_equal(a, b):
    if a is b:
        return True
    if type(a) is not type(b) and not (
        isinstance(a, (int, float)) and isinstance(b, (int, float))
    ):
        return False
    equals = getattr(a, "equals", None)
    if callable(equals) and hasattr(a, "shape"):
        try:
            return bool(equals(b))
        except Exception:  # noqa: BLE001
            return False
    if _identity_eq(a):
        try:
            return pickle.dumps(a, protocol=4) == pickle.dumps(b, protocol=4)
        except Exception:  # noqa: BLE001
            return False
    try:
        r = a == b
    except Exception:  # noqa: BLE001
        return False
    if isinstance(r, bool):
        return r
    if hasattr(r, "all"):
        try:
            return getattr(a, "shape", None) == getattr(b, "shape", None) and bool(r.all())
        except Exception:  # noqa: BLE001
            return False
    try:
        return bool(r)
    except Exception:  # noqa: BLE001
        return False


def deep_clone(value):
    return copy.deepcopy(value)


def render_args(args, kwargs):
    parts = [repr(a) for a in args]
    parts.extend("%s=%r" % (k, v) for k, v in (kwargs or {}).items())
    return "(" + ", ".join(parts) + ")"


def _label(annotation):
    import inspect

    if annotation is inspect.Parameter.empty or annotation is inspect.Signature.empty:
        return None
    if isinstance(annotation, str):
        return annotation
    if annotation is None or annotation is type(None):
        return "None"
    if isinstance(annotation, type) and not getattr(annotation, "__args__", None):
        return annotation.__qualname__
    text = repr(annotation)
    for prefix in ("typing.", "collections.abc."):
        text = text.replace(prefix, "")
    return text


_KINDS = {
    "POSITIONAL_ONLY": "positional",
    "POSITIONAL_OR_KEYWORD": "positional",
    "VAR_POSITIONAL": "var_positional",
    "KEYWORD_ONLY": "keyword_only",
    "VAR_KEYWORD": "var_keyword",
}


def describe_callable(obj, skip_first=False):
    """Return (name, params, return_label, doc) where params is a list of
    (name, kind, label, default_repr) and any unknown part is None."""
    import inspect

    name = getattr(obj, "__name__", None)
    try:
        sig = inspect.signature(obj)
    except (TypeError, ValueError):
        sig = None
    params = None
    ret = None
    if sig is not None:
        params = []
        items = list(sig.parameters.values())
        if skip_first and items and items[0].kind in (
            inspect.Parameter.POSITIONAL_ONLY,
            inspect.Parameter.POSITIONAL_OR_KEYWORD,
        ):
            items = items[1:]
        for p in items:
            default = None if p.default is inspect.Parameter.empty else repr(p.default)
            params.append((p.name, _KINDS[p.kind.name], _label(p.annotation), default))
        ret = _label(sig.return_annotation)
    target = inspect.unwrap(obj) if hasattr(obj, "__wrapped__") else obj
    if name is None:
        name = getattr(target, "__name__", None)
    doc = inspect.getdoc(target)
    return (name, params, ret, doc)


def _public(name):
    return not name.startswith("_")


def type_schema(value):
    """Return (type_name, doc, methods, fields) for a class or an instance.

    methods is a list of describe_callable tuples without the receiver;
    fields is a list of (name, label)."""
    import dataclasses
    import inspect

    cls = value if isinstance(value, type) else type(value)
    doc = cls.__doc__
    if doc is not None and dataclasses.is_dataclass(cls) and doc.startswith(cls.__name__ + "("):
        doc = None
    doc = inspect.cleandoc(doc) if doc else None
    methods = []
    fields = []
    seen = set()
    chain = [c for c in reversed(cls.__mro__) if c is not object]
    for klass in chain:
        for fname, ann in getattr(klass, "__dict__", {}).get("__annotations__", {}).items():
            if _public(fname) and fname not in seen:
                seen.add(fname)
                fields.append((fname, _label(ann) or "Any"))
    for klass in chain:
        for attr, member in klass.__dict__.items():
            if not _public(attr) or attr in seen:
                continue
            if isinstance(member, property):
                seen.add(attr)
                ret = None
                if member.fget is not None:
                    ret = describe_callable(member.fget)[2]
                fields.append((attr, ret or "Any"))
            elif isinstance(member, staticmethod):
                seen.add(attr)
                methods.append(describe_callable(member.__func__)[:3] + (attr,))
            elif isinstance(member, classmethod):
                seen.add(attr)
                methods.append(describe_callable(member.__func__, True)[:3] + (attr,))
            elif inspect.isfunction(member):
                seen.add(attr)
                methods.append(describe_callable(member, True)[:3] + (attr,))
    if not isinstance(value, type):
        for attr, member in getattr(value, "__dict__", {}).items():
            if _public(attr) and attr not in seen and not callable(member):
                seen.add(attr)
                fields.append((attr, type(member).__name__))
    return (cls.__name__, doc, [(m[3], m[1], m[2]) for m in methods], fields)


def parse_tree(source):
    return ast.parse(source, "<cell>", "exec")


def syntax_location(exc):
    return (exc.lineno or 1, exc.offset or 1, exc.msg or str(exc))


def _dotted(node):
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return ".".join(reversed(parts))
    return None


def tree_facts(tree):
    """Flatten the nodes a policy can match into (kind, name, line, col) tuples,
    where kind is import, call, ref or attr and col is 1-based."""
    facts = []
    for node in ast.walk(tree):
        line = getattr(node, "lineno", 1)
        col = getattr(node, "col_offset", 0) + 1
        if isinstance(node, ast.Import):
            for alias in node.names:
                facts.append(("import", alias.name, line, col))
        elif isinstance(node, ast.ImportFrom):
            if node.module and not node.level:
                facts.append(("import", node.module, line, col))
        elif isinstance(node, ast.Call):
            func = node.func
            if isinstance(func, ast.Name):
                facts.append(("call", func.id, line, col))
            elif isinstance(func, ast.Attribute):
                facts.append(("call", _dotted(func) or "?." + func.attr, line, col))
        elif isinstance(node, ast.Attribute):
            facts.append(("attr", node.attr, line, col))
        elif isinstance(node, ast.Name):
            facts.append(("ref", node.id, line, col))
    return facts


def _plain(value):
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, float):
        return None if value != value else value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted((_plain(v) for v in value), key=repr)
    if hasattr(value, "columns") and callable(getattr(value, "to_dict", None)):
        return _plain(value.to_dict(orient="list"))
    for attr in ("tolist", "item"):
        method = getattr(value, attr, None)
        if callable(method):
            return _plain(method())
    raise TypeError("no plain form for %s" % type(value).__name__)


def to_plain(value):
    """JSON text for containers, scalars, arrays and frames."""
    import json

    return json.dumps(_plain(value))

