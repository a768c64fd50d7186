"""SMILES validation, tokenization and stereo stripping.

Only a grammar subset is accepted: organic-subset atoms, aromatic atoms,
bracket atoms, the bonds ``- = # : / \\``, branches, ring closures (single
digit or ``%nn``) and ``.`` fragment separators. There is no valence or
aromaticity checking; molecule identity is plain string equality of the
normalized form.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC = ("b", "c", "n", "o", "p", "s")
BONDS = "-=#:/\\"

# Symbols allowed inside brackets. Aromatic forms follow OpenSMILES.
_ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir
    Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No
    Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)
_BRACKET_AROMATIC = frozenset({"b", "c", "n", "o", "p", "s", "se", "as", "te"})

_BRACKET_RE = re.compile(
    r"""
    (?P<isotope>\d+)?
    (?P<symbol>[A-Z][a-z]?|[a-z]{1,2}|\*)
    (?P<chiral>@(?:@|TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?)?
    (?P<hcount>H\d?)?
    (?P<charge>[+-](?:\d{1,2}|[+-]*))?
    (?P<cls>:\d+)?
    """,
    re.VERBOSE,
)


class ParseError(ValueError):
    """Raised when a string falls outside the accepted SMILES subset."""

    def __init__(self, message: str, position: int | None = None) -> None:
        self.position = position
        where = f" at offset {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class UnbalancedBracket(ParseError):
    pass


class UnpairedRingBond(ParseError):
    pass


class UnknownSymbol(ParseError):
    pass


class TokenKind(str, Enum):
    ATOM = "atom"
    AROMATIC = "aromatic"
    BRACKET = "bracket"
    BOND = "bond"
    RING = "ring"
    BRANCH_OPEN = "branch_open"
    BRANCH_CLOSE = "branch_close"
    DOT = "dot"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind
    offset: int


@dataclass(frozen=True)
class Smiles:
    """A normalized (whitespace-trimmed, stereo-free) SMILES string."""

    text: str

    def __str__(self) -> str:
        return self.text


def _match_bracket(s: str, start: int) -> int:
    """Return the index just past the ``]`` closing the bracket at ``start``."""
    end = s.find("]", start + 1)
    nxt = s.find("[", start + 1)
    if end < 0 or (0 <= nxt < end):
        raise UnbalancedBracket("unclosed '['", start)
    body = s[start + 1 : end]
    m = _BRACKET_RE.fullmatch(body)
    if m is None:
        raise UnknownSymbol(f"malformed bracket atom [{body}]", start)
    sym = m.group("symbol")
    if sym != "*" and sym not in _ELEMENTS and sym not in _BRACKET_AROMATIC:
        raise UnknownSymbol(f"unknown element {sym!r}", start + 1)
    return end + 1


def _scan(s: str) -> list[Token]:
    tokens: list[Token] = []
    open_rings: dict[str, int] = {}
    depth = 0
    i, n = 0, len(s)
    while i < n:
        ch = s[i]
        if ch == "[":
            j = _match_bracket(s, i)
            tokens.append(Token(s[i:j], TokenKind.BRACKET, i))
        elif ch == "]":
            raise UnbalancedBracket("unexpected ']'", i)
        elif s.startswith(("Cl", "Br"), i):
            j = i + 2
            tokens.append(Token(s[i:j], TokenKind.ATOM, i))
        elif ch in "BCNOPSFI":
            j = i + 1
            tokens.append(Token(ch, TokenKind.ATOM, i))
        elif ch in AROMATIC:
            j = i + 1
            tokens.append(Token(ch, TokenKind.AROMATIC, i))
        elif ch in BONDS:
            j = i + 1
            tokens.append(Token(ch, TokenKind.BOND, i))
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                label = s[i + 1 : i + 3]
                if len(label) != 2 or not label.isdigit():
                    raise UnknownSymbol("'%' must be followed by two digits", i)
                j = i + 3
            else:
                label = ch
                j = i + 1
            if label in open_rings:
                del open_rings[label]
            else:
                open_rings[label] = i
            tokens.append(Token(s[i:j], TokenKind.RING, i))
        elif ch == "(":
            depth += 1
            j = i + 1
            tokens.append(Token(ch, TokenKind.BRANCH_OPEN, i))
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise UnbalancedBracket("unexpected ')'", i)
            j = i + 1
            tokens.append(Token(ch, TokenKind.BRANCH_CLOSE, i))
        elif ch == ".":
            j = i + 1
            tokens.append(Token(ch, TokenKind.DOT, i))
        else:
            raise UnknownSymbol(f"unknown symbol {ch!r}", i)
        i = j
    if depth:
        raise UnbalancedBracket("unclosed '('", s.rfind("("))
    if open_rings:
        label, pos = min(open_rings.items(), key=lambda kv: kv[1])
        raise UnpairedRingBond(f"ring bond {label!r} never closes", pos)
    return tokens


def validate(s: str) -> None:
    """Raise a :class:`ParseError` subclass unless ``s`` is acceptable.

    Shares its scanner with :func:`tokenize`, so both accept exactly the
    same strings.
    """
    _scan(s)


def is_valid(s: str) -> bool:
    try:
        _scan(s)
    except ParseError:
        return False
    return True


_CHIRAL_RE = re.compile(r"@(?:@|TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?")


def strip_stereo(s: str) -> Smiles:
    """Trim whitespace, drop ``/`` and ``\\`` bonds and chirality marks.

    Brackets are kept, so ``[C@H]`` becomes ``[CH]``.
    """
    s = s.strip()
    tokens = _scan(s)
    parts = []
    for tok in tokens:
        if tok.kind is TokenKind.BOND and tok.text in "/\\":
            continue
        if tok.kind is TokenKind.BRACKET:
            parts.append(_CHIRAL_RE.sub("", tok.text, count=1))
        else:
            parts.append(tok.text)
    return Smiles("".join(parts))


def normalize(s: str) -> Smiles:
    return strip_stereo(s)


def tokenize(s: Smiles | str) -> list[Token]:
    text = s.text if isinstance(s, Smiles) else s
    return _scan(text)


def token_texts(s: Smiles | str) -> list[str]:
    return [t.text for t in tokenize(s)]
