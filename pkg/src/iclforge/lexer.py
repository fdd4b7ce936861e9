"""Hand-rolled lexers for C, Java, and Python snippets.

Tokens carry character offsets into the original source so that
identifier occurrences can be rewritten in place. The lexers are
deliberately permissive about anything that does not affect
identifier boundaries (e.g. operator semantics), but strict about
string, character, and comment termination.
"""

from __future__ import annotations

import ast
import keyword
import re
from typing import Iterable, NamedTuple

from .errors import ParseError


class Token(NamedTuple):
    kind: str  # "id" | "kw" | "num" | "str" | "comment" | "pp" | "op"
    text: str
    start: int

    @property
    def end(self) -> int:
        return self.start + len(self.text)


C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    _Bool _Complex _Imaginary""".split()
)

JAVA_KEYWORDS = frozenset(
    """abstract assert boolean break byte case catch char class const continue
    default do double else enum extends final finally float for goto if
    implements import instanceof int interface long native new package private
    protected public return short static strictfp super switch synchronized
    this throw throws transient try var void volatile while""".split()
)

PYTHON_KEYWORDS = frozenset(keyword.kwlist)

# Tokens that may not be used as fresh identifier names, per language.
RESERVED_WORDS = {
    "c": C_KEYWORDS | {"true", "false", "NULL", "bool"},
    "java": JAVA_KEYWORDS | {"true", "false", "null"},
    "python": PYTHON_KEYWORDS | {"match", "case", "self", "cls"},
}

IDENT_RE = {
    "c": re.compile(r"[A-Za-z_][A-Za-z0-9_]*"),
    "java": re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*"),
    "python": re.compile(r"[A-Za-z_][A-Za-z0-9_]*"),
}

_NUM_RE = {
    "c": re.compile(
        r"(?:0[xX][0-9a-fA-F]+|\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
        r"|\d+(?:[eE][+-]?\d+)?)[uUlLfF]*"
    ),
    "java": re.compile(
        r"(?:0[xX][0-9a-fA-F_]+|\d[\d_]*\.[\d_]*(?:[eE][+-]?[\d_]+)?"
        r"|\.[\d_]+(?:[eE][+-]?[\d_]+)?|\d[\d_]*(?:[eE][+-]?[\d_]+)?)[lLfFdD]?"
    ),
    "python": re.compile(
        r"(?:0[xXoObB][0-9a-fA-F_]+|\d[\d_]*\.[\d_]*(?:[eE][+-]?[\d_]+)?"
        r"|\.[\d_]+(?:[eE][+-]?[\d_]+)?|\d[\d_]*(?:[eE][+-]?[\d_]+)?)[jJ]?"
    ),
}

_MULTI_OPS = {
    "c": [
        "<<=", ">>=", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=",
        "&&", "||", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "##",
    ],
    "java": [
        ">>>=", "<<=", ">>=", ">>>", "->", "::", "++", "--", "<<", ">>",
        "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=",
        "&=", "|=", "^=",
    ],
    "python": [
        "**=", "//=", "<<=", ">>=", "...", "->", ":=", "**", "//", "<<",
        ">>", "<=", ">=", "==", "!=", "+=", "-=", "*=", "/=", "%=", "&=",
        "|=", "^=", "@=",
    ],
}

_STRING_PREFIX_RE = re.compile(r"(?:[rRbBuUfF]{1,3})?(?:'''|\"\"\"|'|\")")

LANGUAGES = ("c", "java", "python")


def _scan_quoted(code: str, pos: int, quote: str, allow_newline: bool) -> int:
    """Return the offset just past the closing quote, or raise ParseError."""
    i = pos + len(quote)
    n = len(code)
    while i < n:
        ch = code[i]
        if ch == "\\":
            i += 2
            continue
        if code.startswith(quote, i):
            return i + len(quote)
        if ch == "\n" and not allow_newline:
            raise ParseError(pos, "unterminated string literal")
        i += 1
    raise ParseError(pos, "unterminated string literal")


def _scan_pp_directive(code: str, pos: int) -> int:
    """Consume a C preprocessor line, honoring backslash continuations."""
    i = pos
    n = len(code)
    while i < n:
        if code[i] == "\n":
            if i > pos and code[i - 1] == "\r":
                if i >= 2 and code[i - 2] == "\\":
                    i += 1
                    continue
            elif i > pos and code[i - 1] == "\\":
                i += 1
                continue
            return i
        i += 1
    return n


def tokenize(code: str, language: str) -> list[Token]:
    """Lex a snippet into offset-bearing tokens.

    Comments and preprocessor directives are kept as single tokens;
    whitespace is dropped. Raises ParseError on unterminated strings,
    characters, or block comments.
    """
    if language not in LANGUAGES:
        raise ValueError(f"unsupported language: {language!r}")
    ident_re = IDENT_RE[language]
    num_re = _NUM_RE[language]
    multi_ops = _MULTI_OPS[language]
    keywords = {"c": C_KEYWORDS, "java": JAVA_KEYWORDS, "python": PYTHON_KEYWORDS}[language]

    tokens: list[Token] = []
    i = 0
    n = len(code)
    at_line_start = True
    while i < n:
        ch = code[i]
        if ch in " \t\r\n\f\v":
            if ch == "\n":
                at_line_start = True
            i += 1
            continue

        if language == "c" and ch == "#" and at_line_start:
            end = _scan_pp_directive(code, i)
            tokens.append(Token("pp", code[i:end], i))
            i = end
            continue
        at_line_start = False

        if language in ("c", "java"):
            if code.startswith("//", i):
                end = code.find("\n", i)
                end = n if end == -1 else end
                tokens.append(Token("comment", code[i:end], i))
                i = end
                continue
            if code.startswith("/*", i):
                close = code.find("*/", i + 2)
                if close == -1:
                    raise ParseError(i, "unterminated block comment")
                tokens.append(Token("comment", code[i : close + 2], i))
                i = close + 2
                continue
            if ch == '"':
                end = _scan_quoted(code, i, '"', allow_newline=False)
                tokens.append(Token("str", code[i:end], i))
                i = end
                continue
            if ch == "'":
                end = _scan_quoted(code, i, "'", allow_newline=False)
                tokens.append(Token("str", code[i:end], i))
                i = end
                continue
        else:  # python
            if ch == "#":
                end = code.find("\n", i)
                end = n if end == -1 else end
                tokens.append(Token("comment", code[i:end], i))
                i = end
                continue
            if ch in "'\"" or (ch in "rRbBuUfF" and _looks_like_string(code, i)):
                m = _STRING_PREFIX_RE.match(code, i)
                if m is not None and m.group().endswith(("'", '"')):
                    lexeme = m.group()
                    if lexeme.endswith(("'''", '"""')):
                        quote = lexeme[-3:]
                        end = _scan_quoted(code, m.end() - 3, quote, allow_newline=True)
                    else:
                        quote = lexeme[-1]
                        end = _scan_quoted(code, m.end() - 1, quote, allow_newline=False)
                    tokens.append(Token("str", code[i:end], i))
                    i = end
                    continue

        m = ident_re.match(code, i)
        if m is not None:
            text = m.group()
            kind = "kw" if text in keywords else "id"
            tokens.append(Token(kind, text, i))
            i = m.end()
            continue

        if ch.isdigit() or (ch == "." and i + 1 < n and code[i + 1].isdigit()):
            m = num_re.match(code, i)
            if m is not None:
                tokens.append(Token("num", m.group(), i))
                i = m.end()
                continue

        for op in multi_ops:
            if code.startswith(op, i):
                tokens.append(Token("op", op, i))
                i += len(op)
                break
        else:
            tokens.append(Token("op", ch, i))
            i += 1
    return tokens


def _looks_like_string(code: str, pos: int) -> bool:
    """True when a string-prefix letter at pos starts a quoted literal."""
    m = _STRING_PREFIX_RE.match(code, pos)
    return m is not None and m.group()[-1] in "'\""


def significant(tokens: Iterable[Token]) -> list[Token]:
    """Drop comment tokens; keep everything that affects structure."""
    return [t for t in tokens if t.kind != "comment"]


def check_parse(code: str, language: str) -> None:
    """Raise ParseError when a snippet fails the language grammar check.

    Python goes through the real parser. C and Java get a lexical pass
    plus bracket balancing, which is the level of structure the
    rewriting engine relies on.
    """
    if language == "python":
        try:
            ast.parse(code)
        except SyntaxError as exc:
            offset = _syntax_error_offset(code, exc)
            raise ParseError(offset, exc.msg or "syntax error") from exc
        return

    tokens = tokenize(code, language)
    pairs = {")": "(", "]": "[", "}": "{"}
    stack: list[Token] = []
    for tok in tokens:
        if tok.kind != "op":
            continue
        if tok.text in "([{":
            stack.append(tok)
        elif tok.text in ")]}":
            if not stack or stack[-1].text != pairs[tok.text]:
                raise ParseError(tok.start, f"unbalanced {tok.text!r}")
            stack.pop()
    if stack:
        raise ParseError(stack[-1].start, f"unclosed {stack[-1].text!r}")


def _syntax_error_offset(code: str, exc: SyntaxError) -> int:
    lines = code.splitlines(keepends=True)
    lineno = (exc.lineno or 1) - 1
    col = max((exc.offset or 1) - 1, 0)
    prefix = sum(len(line) for line in lines[:lineno])
    return min(prefix + col, len(code))
