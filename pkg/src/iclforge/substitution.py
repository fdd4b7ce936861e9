"""Substitute generation for variable renaming.

The model proposes fillers for the masked first occurrence of a
variable; proposals are then re-ranked by embedding similarity between
the original snippet and the snippet with the proposal in place, and
only the closest ones are kept.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import NoProposals
from .gateway import DEFAULT_MASK_TOKEN, Gateway
from .mutation import VariableSite, _occurs_as_word
from .retrieval import EmbeddingCache, cosine_similarity, embed_text

# Model proposal fan-out and the similarity-ranked cut kept from it.
DEFAULT_TOP_I = 80
DEFAULT_TOP_K = 40


@dataclass(frozen=True)
class SubstituteSet:
    """Similarity-ranked replacement names for one variable."""

    variable: str
    candidates: tuple[tuple[str, float], ...]  # (token, cosine), best first
    top_i: int
    top_k: int

    def tokens(self) -> tuple[str, ...]:
        return tuple(token for token, _ in self.candidates)


def mask_first_occurrence(
    code: str, site: VariableSite, mask_token: str = DEFAULT_MASK_TOKEN
) -> str:
    """Replace the first occurrence of the variable with the mask sentinel."""
    offset, length = site.occurrences[0]
    if code[offset : offset + length] != site.name:
        raise ValueError(f"stale occurrence at {offset} for {site.name!r}")
    return code[:offset] + mask_token + code[offset + length :]


def _with_replacement(code: str, site: VariableSite, token: str) -> str:
    offset, length = site.occurrences[0]
    return code[:offset] + token + code[offset + length :]


def build_substitute_set(
    code: str,
    site: VariableSite,
    gateway: Gateway,
    language: str,
    top_i: int = DEFAULT_TOP_I,
    top_k: int = DEFAULT_TOP_K,
    mask_token: str = DEFAULT_MASK_TOKEN,
    cache: EmbeddingCache | None = None,
) -> SubstituteSet:
    """Propose, filter, and similarity-rank substitutes for one variable.

    Keeps at most ``top_k`` of up to ``top_i`` model proposals, ordered
    by cosine similarity (descending, ties lexicographic) between the
    original snippet and the snippet with the proposal substituted at
    the masked position. Proposals already occurring in the snippet are
    dropped; raises NoProposals when nothing survives.
    """
    if top_k < 1 or top_i < 1:
        raise ValueError("top_i and top_k must be at least 1")
    masked = mask_first_occurrence(code, site, mask_token)
    proposals = gateway.propose_substitutes(masked, top_i, language=language, mask_token=mask_token)
    fresh = [p.token for p in proposals if not _occurs_as_word(p.token, code)]
    if not fresh:
        raise NoProposals(f"no usable substitutes for {site.name!r}")
    reference = embed_text(gateway, code, cache)
    scored: list[tuple[str, float]] = []
    for token in fresh:
        candidate_vec = embed_text(gateway, _with_replacement(code, site, token), cache)
        scored.append((token, cosine_similarity(reference, candidate_vec)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return SubstituteSet(
        variable=site.name,
        candidates=tuple(scored[:top_k]),
        top_i=top_i,
        top_k=top_k,
    )
