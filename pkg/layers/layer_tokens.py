"""
Structured prompt template and typed token stream.

Template:
    "<prompt>. <SEP> The <word 1> looks like <image 1>. The <word 2> looks like <image 2>."
Stream order (1-based seq_pos):
    TEXT (prompt, <SEP>, first lead-in) | IMG_SEM_1 | TEXT (lead-in 2) | IMG_SEM_2 | ...
    | IMG_VAE_1 | IMG_VAE_2 | ...
Boundaries are the inclusive end position of every segment; the last one is
the stream length.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

from core.core_constants import (
    DEFAULT_SEM_GRID, DEFAULT_VAE_GRID, IDENTITY_LEAD_IN, IDENTITY_SENTENCE, SEP_TOKEN,
)
from core.core_errors import LayoutError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"<[^>]+>|[A-Za-z0-9']+")
_IMAGE_SLOT_RE = re.compile(r"<image\s+(\d+)>")
_IDENTITY_RE = re.compile(r"\s*The\s+(.+?)\s+looks\s+like\s+<image\s+(\d+)>\.?")


class TokenKind(str, Enum):
    TEXT = "TEXT"
    IMG_SEM = "IMG_SEM"
    IMG_VAE = "IMG_VAE"


@dataclass(frozen=True)
class SubjectSpec:
    entity_word: str
    sem_grid: Tuple[int, int] = DEFAULT_SEM_GRID
    vae_grid: Tuple[int, int] = DEFAULT_VAE_GRID

    def __post_init__(self):
        if not self.entity_word or not tokenize(self.entity_word) or "<" in self.entity_word:
            raise LayoutError(f"invalid entity word {self.entity_word!r}")
        for name in ("sem_grid", "vae_grid"):
            grid = tuple(int(v) for v in getattr(self, name))
            if len(grid) != 2 or min(grid) < 1:
                raise LayoutError(f"{name} must be two positive ints, got {getattr(self, name)!r}")
            object.__setattr__(self, name, grid)

    @property
    def sem_count(self) -> int:
        return self.sem_grid[0] * self.sem_grid[1]

    @property
    def vae_count(self) -> int:
        return self.vae_grid[0] * self.vae_grid[1]

    @property
    def lead_in_count(self) -> int:
        return len(tokenize(IDENTITY_LEAD_IN.format(word=self.entity_word)))


@dataclass(frozen=True)
class TokenEntry:
    kind: TokenKind
    subject_id: Optional[int]
    seq_pos: int


class Segment(NamedTuple):
    kind: TokenKind
    subject_id: Optional[int]
    start: int  # zero-based, inclusive
    stop: int   # zero-based, exclusive


@dataclass
class TokenStream:
    entries: List[TokenEntry]
    boundaries: List[int]
    subjects: List[SubjectSpec] = field(default_factory=list)
    text_tokens: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def text_count(self) -> int:
        return sum(1 for e in self.entries if e.kind is TokenKind.TEXT)

    def positions(self, *kinds: TokenKind) -> List[int]:
        """Zero-based offsets of every entry whose kind is in `kinds`."""
        return [i for i, e in enumerate(self.entries) if e.kind in kinds]

    def segments(self) -> List[Segment]:
        out, start = [], 0
        for mark in self.boundaries:
            first = self.entries[start]
            out.append(Segment(first.kind, first.subject_id, start, mark))
            start = mark
        return out

    def to_document(self) -> Dict[str, Any]:
        return {
            "boundaries": list(self.boundaries),
            "subjects": [s.entity_word for s in self.subjects],
            "tokens": [
                {"kind": e.kind.value, "seq_pos": e.seq_pos, "subject_id": e.subject_id}
                for e in self.entries
            ],
        }


class ParsedTemplate(NamedTuple):
    prompt: str
    words: List[str]
    slots: List[int]


# ============================================================================
# TEMPLATE
# ============================================================================
def tokenize(text: str) -> List[str]:
    """One token per word or <...> tag; punctuation is dropped."""
    return _TOKEN_RE.findall(text)


def build_template(prompt: str, subjects: Sequence[SubjectSpec]) -> str:
    body = prompt.strip()
    if not body:
        raise LayoutError("empty prompt")
    if SEP_TOKEN in body or _IMAGE_SLOT_RE.search(body):
        raise LayoutError(f"prompt {prompt!r} contains a reserved {SEP_TOKEN} or <image N> token")
    if not subjects:
        return prompt
    if body[-1] not in ".!?":
        body += "."
    sentences = " ".join(
        IDENTITY_SENTENCE.format(word=s.entity_word, index=i + 1) for i, s in enumerate(subjects)
    )
    return f"{body} {SEP_TOKEN} {sentences}"


def parse_template(template: str) -> ParsedTemplate:
    """Recover prompt, subject words and <image i> slot numbers from a template."""
    parts = template.split(SEP_TOKEN)
    if len(parts) == 1:
        if _IMAGE_SLOT_RE.search(template):
            raise LayoutError("image slot found without a <SEP> separator")
        return ParsedTemplate(template, [], [])
    if len(parts) > 2:
        raise LayoutError(f"{SEP_TOKEN} appears {len(parts) - 1} times")

    head, tail = parts[0].strip(), parts[1]
    words, slots, pos = [], [], 0
    while pos < len(tail.rstrip()):
        match = _IDENTITY_RE.match(tail, pos)
        if not match:
            raise LayoutError(f"unparseable identity sentence at {tail[pos:]!r}")
        words.append(match.group(1))
        slots.append(int(match.group(2)))
        pos = match.end()
    if not words:
        raise LayoutError("template has a separator but no identity sentences")
    return ParsedTemplate(head, words, slots)


# ============================================================================
# TOKEN LAYOUT
# ============================================================================
def layout_tokens(prompt_token_count: int, subjects: Sequence[SubjectSpec]) -> TokenStream:
    """
    `prompt_token_count` counts every TEXT token before <image 1>. Each later
    subject gets a TEXT segment holding its "The <word> looks like" lead-in.
    """
    if prompt_token_count < 1:
        raise LayoutError(f"prompt_token_count must be >= 1, got {prompt_token_count}")

    entries: List[TokenEntry] = []
    boundaries: List[int] = []

    def push(kind: TokenKind, subject_id: Optional[int], count: int) -> None:
        for _ in range(count):
            entries.append(TokenEntry(kind, subject_id, len(entries) + 1))
        boundaries.append(len(entries))

    push(TokenKind.TEXT, None, prompt_token_count)
    for k, subject in enumerate(subjects):
        if k > 0:
            push(TokenKind.TEXT, None, subject.lead_in_count)
        push(TokenKind.IMG_SEM, k, subject.sem_count)
    for k, subject in enumerate(subjects):
        push(TokenKind.IMG_VAE, k, subject.vae_count)

    return TokenStream(entries, boundaries, list(subjects))


def layout_template(prompt: str, subjects: Sequence[SubjectSpec]) -> TokenStream:
    """Build the template, tokenize it and lay out the stream with exact counts."""
    template = build_template(prompt, subjects)
    tokens = tokenize(template)
    slot_positions = [i for i, tok in enumerate(tokens) if _IMAGE_SLOT_RE.fullmatch(tok)]
    leading = slot_positions[0] if slot_positions else len(tokens)
    if leading < 1:
        raise LayoutError(f"prompt {prompt!r} has no tokens")

    stream = layout_tokens(leading, subjects)
    stream.text_tokens = [tok for tok in tokens if not _IMAGE_SLOT_RE.fullmatch(tok)]
    if len(stream.text_tokens) != stream.text_count:
        raise LayoutError(
            f"template has {len(stream.text_tokens)} text tokens, layout expects {stream.text_count}"
        )
    logger.debug(f"Laid out {len(stream)} tokens for {len(subjects)} subject(s)")
    return stream


def validate_stream(stream: TokenStream) -> None:
    """Raise LayoutError unless `stream` has the exact shape layout_tokens produces."""
    if not stream.entries or not stream.boundaries:
        raise LayoutError("empty token stream")
    if any(b <= a for a, b in zip(stream.boundaries, stream.boundaries[1:])):
        raise LayoutError(f"boundaries not strictly increasing: {stream.boundaries}")
    if stream.boundaries[-1] != len(stream.entries) or stream.boundaries[0] < 1:
        raise LayoutError(f"boundaries {stream.boundaries} do not partition {len(stream)} tokens")
    for i, entry in enumerate(stream.entries):
        if entry.seq_pos != i + 1:
            raise LayoutError(f"token {i} has seq_pos {entry.seq_pos}")

    segments = stream.segments()
    for seg in segments:
        for entry in stream.entries[seg.start:seg.stop]:
            if (entry.kind, entry.subject_id) != (seg.kind, seg.subject_id):
                raise LayoutError(f"mixed segment at positions {seg.start + 1}..{seg.stop}")

    n = len(stream.subjects)
    expected = [(TokenKind.TEXT, None)]
    for k in range(n):
        if k > 0:
            expected.append((TokenKind.TEXT, None))
        expected.append((TokenKind.IMG_SEM, k))
    expected += [(TokenKind.IMG_VAE, k) for k in range(n)]
    if [(s.kind, s.subject_id) for s in segments] != expected:
        raise LayoutError("segment kinds do not follow TEXT / IMG_SEM ... IMG_VAE order")

    for seg in segments:
        if seg.kind is TokenKind.TEXT:
            continue
        subject = stream.subjects[seg.subject_id]
        want = subject.sem_count if seg.kind is TokenKind.IMG_SEM else subject.vae_count
        if seg.stop - seg.start != want:
            raise LayoutError(f"{seg.kind.value} block of subject {seg.subject_id} has "
                              f"{seg.stop - seg.start} tokens, grid needs {want}")
