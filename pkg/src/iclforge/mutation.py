"""Identifier-level code rewriting for C, Java, and Python snippets.

The extractors find local variables that can be renamed without
changing program behavior: names declared and initialized inside a
function (or module, for Python) body, excluding anything that could
alias a field, parameter, type, macro, or out-of-snippet binding.
Renaming rewrites every occurrence of the name so the result stays
alpha-equivalent to the parent snippet.
"""

from __future__ import annotations

import ast
import hashlib
import re
from dataclasses import dataclass

from .errors import ParseError, ReservedWord, SubstituteCollision
from .lexer import (
    IDENT_RE,
    RESERVED_WORDS,
    Token,
    check_parse,
    significant,
    tokenize,
)

_ASSIGN_OPS = frozenset(
    ["=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ">>>="]
)

_C_TYPE_KEYWORDS = frozenset(
    "void char short int long float double signed unsigned _Bool".split()
)
_C_QUALIFIERS = frozenset(
    "auto const extern inline register restrict static volatile".split()
)
_JAVA_TYPE_KEYWORDS = frozenset(
    "boolean byte char short int long float double void var".split()
)
_JAVA_QUALIFIERS = frozenset("final static".split())


@dataclass(frozen=True)
class VariableSite:
    """A renameable local variable and every place its name appears.

    Occurrences are (character offset, length) pairs into the snippet,
    sorted ascending and non-overlapping.
    """

    name: str
    occurrences: tuple[tuple[int, int], ...]
    declared: bool
    initialized: bool

    def __post_init__(self) -> None:
        prev_end = -1
        for offset, length in self.occurrences:
            if offset < prev_end:
                raise ValueError("occurrences overlap or are unsorted")
            if length != len(self.name):
                raise ValueError("occurrence length does not match name")
            prev_end = offset + length

    @property
    def eligible(self) -> bool:
        return self.declared and self.initialized


@dataclass(frozen=True)
class Mutant:
    """A snippet produced by renaming one variable of a parent snippet."""

    code: str
    origin: tuple[str, str]  # (original name, substitute name)
    parent_hash: str


def snippet_hash(code: str) -> str:
    return hashlib.sha256(code.encode("utf-8")).hexdigest()


def make_site(code: str, name: str, offsets: list[int]) -> VariableSite:
    """Build a VariableSite, verifying each occurrence's source text."""
    for offset in offsets:
        if code[offset : offset + len(name)] != name:
            raise ValueError(f"occurrence at {offset} does not spell {name!r}")
    occurrences = tuple((offset, len(name)) for offset in sorted(offsets))
    return VariableSite(name, occurrences, declared=True, initialized=True)


def extract_variables(code: str, language: str) -> list[VariableSite]:
    """Return the renameable local variables of a snippet.

    Sites come back sorted by first occurrence and contain every
    occurrence of the name in the snippet. Raises ParseError when the
    snippet does not lex or parse.
    """
    if language == "python":
        sites = _extract_python(code)
    elif language == "c":
        sites = _extract_c(code)
    elif language == "java":
        sites = _extract_java(code)
    else:
        raise ValueError(f"unsupported language: {language!r}")
    return sorted(sites, key=lambda s: s.occurrences[0][0])


def extract_variables_paired(
    code: str, language: str, separator_line: str
) -> list[VariableSite]:
    """Extract variables from a two-snippet pair joined by a sentinel line.

    Each half is analyzed on its own, so no site ever spans the
    separator; right-half offsets are shifted into pair coordinates.
    """
    sep = f"\n{separator_line}\n"
    cut = code.find(sep)
    if cut < 0:
        return extract_variables(code, language)
    left, right = code[:cut], code[cut + len(sep) :]
    shift = cut + len(sep)
    sites = list(extract_variables(left, language))
    for site in extract_variables(right, language):
        occurrences = tuple((off + shift, length) for off, length in site.occurrences)
        sites.append(VariableSite(site.name, occurrences, site.declared, site.initialized))
    return sorted(sites, key=lambda s: s.occurrences[0][0])


def rename(code: str, site: VariableSite, substitute: str, language: str) -> Mutant:
    """Rewrite every occurrence of a variable to a fresh name.

    The substitute must be a valid identifier, must not be a reserved
    word, and must not already occur anywhere in the snippet (including
    strings and comments). The rewritten snippet is re-checked against
    the language grammar before it is returned.
    """
    ident_re = IDENT_RE[language]
    if ident_re.fullmatch(substitute) is None:
        raise ValueError(f"{substitute!r} is not a valid {language} identifier")
    if substitute in RESERVED_WORDS[language]:
        raise ReservedWord(f"{substitute!r} is reserved in {language}")
    if _occurs_as_word(substitute, code):
        raise SubstituteCollision(f"{substitute!r} already occurs in the snippet")
    pieces: list[str] = []
    cursor = 0
    for offset, length in site.occurrences:
        if code[offset : offset + length] != site.name:
            raise ValueError(f"stale occurrence at {offset} for {site.name!r}")
        pieces.append(code[cursor:offset])
        pieces.append(substitute)
        cursor = offset + length
    pieces.append(code[cursor:])
    mutated = "".join(pieces)
    check_parse(mutated, language)
    return Mutant(code=mutated, origin=(site.name, substitute), parent_hash=snippet_hash(code))


def validate_mutant(mutant: Mutant, parent_code: str, language: str) -> bool:
    """Check that a mutant differs from its parent only at the renamed
    identifier. Returns False instead of raising on any defect."""
    try:
        if mutant.parent_hash != snippet_hash(parent_code):
            return False
        check_parse(mutant.code, language)
        old, new = mutant.origin
        parent_tokens = tokenize(parent_code, language)
        mutant_tokens = tokenize(mutant.code, language)
        if len(parent_tokens) != len(mutant_tokens):
            return False
        changed = 0
        for pt, mt in zip(parent_tokens, mutant_tokens):
            if pt.text == mt.text:
                if pt.kind != mt.kind:
                    return False
                continue
            if pt.kind != "id" or mt.kind != "id":
                return False
            if pt.text != old or mt.text != new:
                return False
            changed += 1
        return changed >= 1
    except Exception:
        return False


def delete_occurrences(code: str, site: VariableSite) -> str:
    """Remove every occurrence of a variable from the snippet text.

    The result is a scoring ablation, not a program; it is not expected
    to parse.
    """
    pieces: list[str] = []
    cursor = 0
    for offset, length in site.occurrences:
        pieces.append(code[cursor:offset])
        cursor = offset + length
    pieces.append(code[cursor:])
    return "".join(pieces)


def _occurs_as_word(name: str, code: str) -> bool:
    pattern = rf"(?<![A-Za-z0-9_$]){re.escape(name)}(?![A-Za-z0-9_$])"
    return re.search(pattern, code) is not None


# --------------------------------------------------------------------------
# Python extraction
# --------------------------------------------------------------------------


def _extract_python(code: str) -> list[VariableSite]:
    try:
        tree = ast.parse(code)
    except SyntaxError as exc:
        raise ParseError(_offset_of_syntax_error(code, exc), exc.msg or "syntax error") from exc

    parents: dict[int, tuple[ast.AST, str]] = {}
    for node in ast.walk(tree):
        for field, value in ast.iter_fields(node):
            for child in _iter_nodes(value):
                parents[id(child)] = (node, field)

    excluded = _python_excluded_names(tree)
    scope_bindings: dict[int, set[str]] = {id(tree): _scope_assignments(tree)}
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            scope_bindings[id(node)] = _scope_assignments(node)

    candidates = set().union(*scope_bindings.values()) if scope_bindings else set()
    candidates -= excluded
    candidates -= RESERVED_WORDS["python"]

    line_starts = _line_start_offsets(code)
    lines = code.split("\n")
    sites: list[VariableSite] = []
    for name in sorted(candidates):
        offsets: list[int] = []
        resolvable = True
        for node in ast.walk(tree):
            if not isinstance(node, ast.Name) or node.id != name:
                continue
            if not _binding_visible(node, name, parents, scope_bindings, tree):
                resolvable = False
                break
            offsets.append(_char_offset(node, line_starts, lines))
        if not resolvable or not offsets:
            continue
        offsets = sorted(set(offsets))
        if any(code[o : o + len(name)] != name for o in offsets):
            continue
        sites.append(make_site(code, name, offsets))
    return sites


def _iter_nodes(value: object):
    if isinstance(value, ast.AST):
        yield value
    elif isinstance(value, list):
        for item in value:
            if isinstance(item, ast.AST):
                yield item


def _python_excluded_names(tree: ast.AST) -> set[str]:
    """Names that cannot be renamed by rewriting Name nodes alone."""
    excluded: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Attribute):
            excluded.add(node.attr)
        elif isinstance(node, (ast.Global, ast.Nonlocal)):
            excluded.update(node.names)
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            excluded.add(node.name)
            excluded.update(_parameter_names(node.args))
        elif isinstance(node, ast.Lambda):
            excluded.update(_parameter_names(node.args))
        elif isinstance(node, ast.ClassDef):
            excluded.add(node.name)
            for stmt in node.body:
                excluded.update(_direct_targets(stmt))
        elif isinstance(node, (ast.Import, ast.ImportFrom)):
            for alias in node.names:
                excluded.add((alias.asname or alias.name).split(".")[0])
        elif isinstance(node, (ast.ListComp, ast.SetComp, ast.DictComp, ast.GeneratorExp)):
            for comp in node.generators:
                excluded.update(_target_names(comp.target))
        elif isinstance(node, ast.ExceptHandler) and node.name:
            excluded.add(node.name)
        elif isinstance(node, ast.JoinedStr):
            for sub in ast.walk(node):
                if isinstance(sub, ast.Name):
                    excluded.add(sub.id)
        elif isinstance(node, ast.MatchAs) and node.name:
            excluded.add(node.name)
        elif isinstance(node, ast.MatchStar) and node.name:
            excluded.add(node.name)
        elif isinstance(node, ast.MatchMapping) and node.rest:
            excluded.add(node.rest)
    return excluded


def _parameter_names(args: ast.arguments) -> set[str]:
    names = {a.arg for a in args.posonlyargs + args.args + args.kwonlyargs}
    if args.vararg:
        names.add(args.vararg.arg)
    if args.kwarg:
        names.add(args.kwarg.arg)
    return names


def _target_names(target: ast.AST) -> set[str]:
    names: set[str] = set()
    for node in ast.walk(target):
        if isinstance(node, ast.Name):
            names.add(node.id)
    return names


def _direct_targets(stmt: ast.AST) -> set[str]:
    if isinstance(stmt, ast.Assign):
        return set().union(*(_target_names(t) for t in stmt.targets))
    if isinstance(stmt, (ast.AnnAssign, ast.AugAssign)):
        return _target_names(stmt.target)
    return set()


_SCOPE_NODES = (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda, ast.ClassDef)


def _scope_assignments(scope: ast.AST) -> set[str]:
    """Names assigned by plain statements of a scope, ignoring nested scopes."""
    names: set[str] = set()
    stack = list(getattr(scope, "body", []))
    while stack:
        node = stack.pop()
        if isinstance(node, _SCOPE_NODES):
            continue
        if isinstance(node, ast.Assign):
            for target in node.targets:
                names |= _target_names(target)
        elif isinstance(node, ast.AnnAssign) and node.value is not None:
            names |= _target_names(node.target)
        elif isinstance(node, ast.AugAssign):
            names |= _target_names(node.target)
        elif isinstance(node, (ast.For, ast.AsyncFor)):
            names |= _target_names(node.target)
        elif isinstance(node, ast.NamedExpr):
            names |= _target_names(node.target)
        if isinstance(node, (ast.ListComp, ast.SetComp, ast.DictComp, ast.GeneratorExp)):
            continue
        stack.extend(ast.iter_child_nodes(node))
    return names


def _binding_visible(
    node: ast.AST,
    name: str,
    parents: dict[int, tuple[ast.AST, str]],
    scope_bindings: dict[int, set[str]],
    tree: ast.AST,
) -> bool:
    """True when some enclosing scope of this occurrence binds the name, so
    renaming all occurrences cannot capture an out-of-snippet binding."""
    current: ast.AST | None = node
    while current is not None:
        entry = parents.get(id(current))
        if entry is None:
            break
        parent, field = entry
        if isinstance(parent, (ast.FunctionDef, ast.AsyncFunctionDef)) and field == "body":
            if name in scope_bindings.get(id(parent), set()):
                return True
        current = parent
    return name in scope_bindings.get(id(tree), set())


def _line_start_offsets(code: str) -> list[int]:
    starts = [0]
    for i, ch in enumerate(code):
        if ch == "\n":
            starts.append(i + 1)
    return starts


def _char_offset(node: ast.AST, line_starts: list[int], lines: list[str]) -> int:
    line = lines[node.lineno - 1]
    col = node.col_offset
    if not line.isascii():
        col = len(line.encode("utf-8")[:col].decode("utf-8", errors="ignore"))
    return line_starts[node.lineno - 1] + col


def _offset_of_syntax_error(code: str, exc: SyntaxError) -> int:
    lines = code.splitlines(keepends=True)
    lineno = (exc.lineno or 1) - 1
    col = max((exc.offset or 1) - 1, 0)
    return min(sum(len(l) for l in lines[:lineno]) + col, len(code))


# --------------------------------------------------------------------------
# C and Java extraction
# --------------------------------------------------------------------------


def _extract_c(code: str) -> list[VariableSite]:
    check_parse(code, "c")
    tokens = tokenize(code, "c")
    sig = [t for t in tokens if t.kind not in ("comment", "pp")]

    excluded = _common_excluded(sig, member_ops=(".", "->"))
    for tok in tokens:
        if tok.kind == "pp":
            excluded.update(IDENT_RE["c"].findall(tok.text))

    body_spans, field_spans, top_spans, params = _c_regions(sig)
    excluded |= params

    declared, type_names = _scan_declarations(
        sig, body_spans, _C_TYPE_KEYWORDS, _C_QUALIFIERS, pointers=True,
        generics=False, enhanced_for=False,
    )
    fields, field_types = _scan_declarations(
        sig, field_spans, _C_TYPE_KEYWORDS, _C_QUALIFIERS, pointers=True,
        generics=False, enhanced_for=False,
    )
    globals_, global_types = _scan_declarations(
        sig, top_spans, _C_TYPE_KEYWORDS, _C_QUALIFIERS, pointers=True,
        generics=False, enhanced_for=False,
    )
    excluded |= set(fields) | set(globals_)
    excluded |= type_names | field_types | global_types

    assigned = _later_assignments(sig, body_spans)
    return _build_sites(code, tokens, declared, assigned, excluded, "c")


def _extract_java(code: str) -> list[VariableSite]:
    check_parse(code, "java")
    tokens = tokenize(code, "java")
    sig = [t for t in tokens if t.kind != "comment"]

    excluded = _common_excluded(sig, member_ops=(".",))
    for i, tok in enumerate(sig):
        if tok.kind == "op" and tok.text == "@" and i + 1 < len(sig) and sig[i + 1].kind == "id":
            excluded.add(sig[i + 1].text)
        if tok.kind == "kw" and tok.text in ("new", "extends", "implements", "throws", "import", "package", "instanceof"):
            if i + 1 < len(sig) and sig[i + 1].kind == "id":
                excluded.add(sig[i + 1].text)

    code_spans, field_spans, params = _java_regions(sig)
    excluded |= params

    declared, type_names = _scan_declarations(
        sig, code_spans, _JAVA_TYPE_KEYWORDS, _JAVA_QUALIFIERS, pointers=False,
        generics=True, enhanced_for=True,
    )
    fields, field_types = _scan_declarations(
        sig, field_spans, _JAVA_TYPE_KEYWORDS,
        _JAVA_QUALIFIERS | frozenset("public private protected transient volatile abstract native synchronized strictfp".split()),
        pointers=False, generics=True, enhanced_for=False,
    )
    excluded |= set(fields)
    excluded |= type_names | field_types

    assigned = _later_assignments(sig, code_spans)
    return _build_sites(code, tokens, declared, assigned, excluded, "java")


def _common_excluded(sig: list[Token], member_ops: tuple[str, ...]) -> set[str]:
    """Names whose occurrences are not plain variable references."""
    excluded: set[str] = set()
    for i, tok in enumerate(sig):
        if tok.kind != "id":
            continue
        prev = sig[i - 1] if i > 0 else None
        nxt = sig[i + 1] if i + 1 < len(sig) else None
        if prev is not None and prev.kind == "op" and prev.text in member_ops:
            excluded.add(tok.text)
        elif nxt is not None and nxt.kind == "op" and nxt.text == "(":
            excluded.add(tok.text)
        elif prev is not None and prev.kind == "kw" and prev.text in ("struct", "union", "enum", "goto", "class", "interface"):
            excluded.add(tok.text)
        elif (
            nxt is not None
            and nxt.kind == "op"
            and nxt.text == ":"
            and (prev is None or (prev.kind == "op" and prev.text in (";", "{", "}")))
        ):
            excluded.add(tok.text)  # statement label
    return excluded


def _build_sites(
    code: str,
    tokens: list[Token],
    declared: dict[str, bool],
    assigned: set[str],
    excluded: set[str],
    language: str,
) -> list[VariableSite]:
    sites: list[VariableSite] = []
    for name, init_at_decl in sorted(declared.items()):
        if name in excluded or name in RESERVED_WORDS[language]:
            continue
        if not (init_at_decl or name in assigned):
            continue
        offsets = [t.start for t in tokens if t.kind == "id" and t.text == name]
        if offsets:
            sites.append(make_site(code, name, offsets))
    return sites


def _later_assignments(sig: list[Token], spans: list[tuple[int, int]]) -> set[str]:
    assigned: set[str] = set()
    for lo, hi in spans:
        for i in range(lo, hi):
            tok = sig[i]
            if tok.kind != "id" or i + 1 >= hi:
                continue
            nxt = sig[i + 1]
            prev = sig[i - 1] if i > lo else None
            if prev is not None and prev.kind == "op" and prev.text in (".", "->"):
                continue
            if nxt.kind == "op" and nxt.text in _ASSIGN_OPS:
                assigned.add(tok.text)
    return assigned


def _matching_paren(sig: list[Token], close_idx: int) -> int:
    depth = 0
    for i in range(close_idx, -1, -1):
        text = sig[i].text
        if sig[i].kind == "op":
            if text == ")":
                depth += 1
            elif text == "(":
                depth -= 1
                if depth == 0:
                    return i
    return -1


def _paren_param_names(sig: list[Token], open_idx: int, close_idx: int) -> set[str]:
    names: set[str] = set()
    for i in range(open_idx + 1, close_idx):
        tok = sig[i]
        if tok.kind != "id":
            continue
        nxt = sig[i + 1]
        if nxt.kind == "op" and nxt.text in (",", ")", "[", ":"):
            prev = sig[i - 1]
            if prev.kind == "op" and prev.text in (".", "->"):
                continue
            names.add(tok.text)
    return names


def _c_regions(
    sig: list[Token],
) -> tuple[list[tuple[int, int]], list[tuple[int, int]], list[tuple[int, int]], set[str]]:
    """Split a C snippet into function bodies, struct/union/enum bodies,
    and top-level gaps; collect parameter names of defined functions."""
    body_spans: list[tuple[int, int]] = []
    field_spans: list[tuple[int, int]] = []
    top_spans: list[tuple[int, int]] = []
    params: set[str] = set()
    depth = 0
    region_open = -1
    region_kind = ""
    top_start = 0
    for i, tok in enumerate(sig):
        if tok.kind != "op" or tok.text not in ("{", "}"):
            continue
        if tok.text == "{":
            depth += 1
            if depth == 1:
                top_spans.append((top_start, i))
                prev = sig[i - 1] if i > 0 else None
                if prev is not None and prev.kind == "op" and prev.text == ")":
                    region_kind = "body"
                    open_paren = _matching_paren(sig, i - 1)
                    if open_paren > 0:
                        params |= _paren_param_names(sig, open_paren, i - 1)
                elif _looks_like_aggregate_tag(sig, i):
                    region_kind = "fields"
                else:
                    region_kind = "other"
                region_open = i
        else:
            depth -= 1
            if depth == 0:
                if region_kind == "body":
                    body_spans.append((region_open + 1, i))
                elif region_kind == "fields":
                    field_spans.append((region_open + 1, i))
                top_start = i + 1
    top_spans.append((top_start, len(sig)))
    return body_spans, field_spans, top_spans, params


def _looks_like_aggregate_tag(sig: list[Token], brace_idx: int) -> bool:
    for i in range(brace_idx - 1, max(brace_idx - 4, -1), -1):
        tok = sig[i]
        if tok.kind == "kw" and tok.text in ("struct", "union", "enum"):
            return True
        if tok.kind == "op" and tok.text in (";", "}", ")", "="):
            return False
    return False


def _java_regions(
    sig: list[Token],
) -> tuple[list[tuple[int, int]], list[tuple[int, int]], set[str]]:
    """Split a Java snippet into code blocks and class-member regions;
    collect method and catch parameter names."""
    code_spans: list[tuple[int, int]] = []
    field_spans: list[tuple[int, int]] = []
    params: set[str] = set()
    stack: list[dict] = []
    for i, tok in enumerate(sig):
        if tok.kind != "op" or tok.text not in ("{", "}"):
            continue
        if tok.text == "{":
            kind = _classify_java_brace(sig, i)
            if stack and stack[-1]["kind"] == "class":
                field_spans.append((stack[-1]["gap"], i))
            if kind == "code" and not any(e["kind"] == "code" for e in stack):
                params |= _java_header_params(sig, i)
            stack.append({"kind": kind, "open": i, "gap": i + 1})
        else:
            if not stack:
                continue
            entry = stack.pop()
            if entry["kind"] == "class":
                field_spans.append((entry["gap"], i))
            if entry["kind"] == "code" and not any(e["kind"] == "code" for e in stack):
                code_spans.append((entry["open"] + 1, i))
            if stack and stack[-1]["kind"] == "class":
                stack[-1]["gap"] = i + 1
    return code_spans, field_spans, params


def _classify_java_brace(sig: list[Token], brace_idx: int) -> str:
    prev = sig[brace_idx - 1] if brace_idx > 0 else None
    if prev is None:
        return "code"
    if prev.kind == "op":
        if prev.text == ")":
            open_paren = _matching_paren(sig, brace_idx - 1)
            j = open_paren - 1
            while j >= 0 and sig[j].kind == "id":
                j -= 1
                if j >= 0 and sig[j].kind == "op" and sig[j].text == ".":
                    j -= 1
                else:
                    break
            if j >= 0 and sig[j].kind == "kw" and sig[j].text == "new":
                return "class"  # anonymous class body
            return "code"
        return "code"  # initializers, lambdas, nested blocks
    if prev.kind == "kw" and prev.text in ("else", "do", "try", "finally"):
        return "code"
    for j in range(brace_idx - 1, -1, -1):
        tok = sig[j]
        if tok.kind == "op" and tok.text in (";", "{", "}", ")"):
            break
        if tok.kind == "kw" and tok.text in ("class", "interface", "enum"):
            return "class"
        if tok.kind == "id" and tok.text == "record":
            return "class"
    return "code"


def _java_header_params(sig: list[Token], brace_idx: int) -> set[str]:
    """Parameter names of the method or catch header owning this block."""
    j = brace_idx - 1
    hops = 0
    while j >= 0 and hops < 40:
        tok = sig[j]
        if tok.kind == "op" and tok.text in (";", "{", "}"):
            return set()
        if tok.kind == "op" and tok.text == ")":
            open_paren = _matching_paren(sig, j)
            if open_paren <= 0:
                return set()
            before = sig[open_paren - 1]
            if before.kind == "id" or (before.kind == "kw" and before.text == "catch"):
                return _paren_param_names(sig, open_paren, j)
            return set()
        j -= 1
        hops += 1
    return set()


def _scan_declarations(
    sig: list[Token],
    spans: list[tuple[int, int]],
    type_keywords: frozenset,
    qualifiers: frozenset,
    pointers: bool,
    generics: bool,
    enhanced_for: bool,
) -> tuple[dict[str, bool], set[str]]:
    """Find declared names in the given token spans.

    Returns (name -> initialized at declaration) plus every identifier
    seen in a type position.
    """
    declared: dict[str, bool] = {}
    type_names: set[str] = set()
    for lo, hi in spans:
        stmt_start = True
        j = lo
        while j < hi:
            tok = sig[j]
            if tok.kind == "op" and tok.text in (";", "{", "}"):
                stmt_start = True
                j += 1
                continue
            if tok.kind == "op" and tok.text == "(":
                prev = sig[j - 1] if j > 0 else None
                stmt_start = prev is not None and prev.kind == "kw" and prev.text in ("for", "catch")
                j += 1
                continue
            if not stmt_start:
                j += 1
                continue
            match = _match_declaration(
                sig, j, hi, type_keywords, qualifiers, pointers, generics, enhanced_for
            )
            if match is None:
                stmt_start = False
                j += 1
                continue
            names, bases, j = match
            for name, has_init in names:
                declared[name] = declared.get(name, False) or has_init
            type_names |= bases
    return declared, type_names


def _match_declaration(
    sig: list[Token],
    start: int,
    hi: int,
    type_keywords: frozenset,
    qualifiers: frozenset,
    pointers: bool,
    generics: bool,
    enhanced_for: bool,
) -> tuple[list[tuple[str, bool]], set[str], int] | None:
    k = start
    seen_type = False
    bases: set[str] = set()

    while k < hi and sig[k].kind == "kw" and sig[k].text in qualifiers | type_keywords:
        if sig[k].text in type_keywords:
            seen_type = True
        k += 1
    if k < hi and sig[k].kind == "kw" and sig[k].text in ("struct", "union", "enum"):
        k += 1
        if k < hi and sig[k].kind == "id":
            k += 1
        seen_type = True
    if not seen_type:
        if k >= hi or sig[k].kind != "id":
            return None
        bases.add(sig[k].text)
        k += 1
        while k + 1 < hi and sig[k].kind == "op" and sig[k].text == "." and sig[k + 1].kind == "id":
            k += 2

    if generics and k < hi and sig[k].kind == "op" and sig[k].text == "<":
        depth = 0
        closed = False
        while k < hi:
            text = sig[k].text
            if sig[k].kind == "op" and set(text) <= {"<", ">"}:
                depth += text.count("<") - text.count(">")
                if depth <= 0:
                    k += 1
                    closed = True
                    break
            elif sig[k].kind == "op" and text in (";", ")", "{", "("):
                return None
            elif sig[k].kind == "id":
                bases.add(sig[k].text)
            k += 1
        if not closed:
            return None

    while k + 1 < hi and sig[k].kind == "op" and sig[k].text == "[" and sig[k + 1].text == "]":
        k += 2

    names: list[tuple[str, bool]] = []
    while True:
        if pointers:
            while k < hi and sig[k].kind == "op" and sig[k].text in ("*", "&"):
                k += 1
        if k >= hi or sig[k].kind != "id":
            break
        name_tok = sig[k]
        k += 1
        while k < hi and sig[k].kind == "op" and sig[k].text == "[":
            depth = 1
            k += 1
            while k < hi and depth > 0:
                if sig[k].kind == "op" and sig[k].text == "[":
                    depth += 1
                elif sig[k].kind == "op" and sig[k].text == "]":
                    depth -= 1
                k += 1
        nxt = sig[k].text if k < hi and sig[k].kind == "op" else ""
        if nxt == "=":
            names.append((name_tok.text, True))
            k += 1
            depth = 0
            while k < hi:
                text = sig[k].text
                if sig[k].kind == "op":
                    if text in ("(", "[", "{"):
                        depth += 1
                    elif text in (")", "]", "}"):
                        if depth == 0:
                            break
                        depth -= 1
                    elif depth == 0 and text in (",", ";"):
                        break
                k += 1
            if k < hi and sig[k].kind == "op" and sig[k].text == ",":
                k += 1
                continue
            break
        if nxt == ",":
            names.append((name_tok.text, False))
            k += 1
            continue
        if nxt == ";":
            names.append((name_tok.text, False))
            break
        if nxt == ":" and enhanced_for:
            names.append((name_tok.text, True))  # assigned by the loop
            break
        break

    if not names:
        return None
    return names, bases, k
