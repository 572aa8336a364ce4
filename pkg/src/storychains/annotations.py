"""Parse and render the markdown grounding format for character mentions.

Annotated stories mark each character mention as `[surface](#id)`;
plural mentions list every cluster they cover: `[We](#1, #2)`. Parsing
computes mention spans against the plain text (tags stripped) in byte
offsets, and rendering is its exact inverse, so annotated fixtures
round-trip byte-for-byte.

Sentences are split on `.`, `!` or `?` followed by whitespace or end of
text. This is a deliberate heuristic (matched to simple declarative
story prose) and is the single splitting rule used across the package;
swap this module's `split_sentences` to change it.
"""

from __future__ import annotations

import re

from .errors import ParseError, ValidationError
from .model import AnnotatedStory, TextualMention

_TAG_TOKEN = re.compile(r"^#([A-Za-z0-9_]+)$")
_TERMINALS = ".!?"


def split_sentences(text: str) -> list[str]:
    """Split text into sentences that concatenate back to the input.

    Trailing whitespace after a terminal stays with the sentence it
    closes, so "".join(split_sentences(t)) == t.
    """
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in _TERMINALS and (i + 1 >= n or text[i + 1].isspace()):
            j = i + 1
            while j < n and text[j].isspace():
                j += 1
            sentences.append(text[start:j])
            start = j
            i = j
        else:
            i += 1
    if start < n:
        sentences.append(text[start:])
    return sentences


def _byte_len(s: str) -> int:
    return len(s.encode("utf-8"))


def _parse_tag_group(group: str, group_offset: int) -> tuple[str, ...]:
    if not group.strip():
        raise ParseError("empty tag list", group_offset)
    names: list[str] = []
    pos = 0
    for part in group.split(","):
        token = part.strip()
        token_offset = group_offset + _byte_len(group[:pos])
        pos += len(part) + 1
        m = _TAG_TOKEN.match(token)
        if m is None:
            raise ParseError(f"malformed '#' token: {token!r}", token_offset)
        if m.group(1) in names:
            raise ParseError(f"duplicate cluster tag '#{m.group(1)}'", token_offset)
        names.append(m.group(1))
    return tuple(names)


def parse_annotated(text: str, story_id: str = "story") -> AnnotatedStory:
    """Parse annotated story text into an AnnotatedStory.

    Raises ParseError (with the byte offset into the annotated input) on
    unbalanced or nested brackets, a bracketed span with no tag group,
    an empty tag list, or a malformed tag token.
    """
    plain_parts: list[str] = []
    plain_bytes = 0
    raw_mentions: list[tuple[int, int, str, tuple[str, ...]]] = []
    i = 0
    byte_pos = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "]":
            raise ParseError("unbalanced brackets: ']' without '['", byte_pos)
        if ch != "[":
            j = i
            while j < n and text[j] not in "[]":
                j += 1
            chunk = text[i:j]
            plain_parts.append(chunk)
            plain_bytes += _byte_len(chunk)
            byte_pos += _byte_len(chunk)
            i = j
            continue
        open_offset = byte_pos
        j = i + 1
        while j < n and text[j] not in "[]":
            j += 1
        if j >= n:
            raise ParseError("unbalanced brackets: '[' without ']'", open_offset)
        if text[j] == "[":
            raise ParseError("nested '[' inside a mention", open_offset + _byte_len(text[i:j]))
        surface = text[i + 1 : j]
        if not surface:
            raise ParseError("empty mention surface", open_offset)
        k = j + 1
        if k >= n or text[k] != "(":
            raise ParseError("untagged mention", open_offset)
        close = text.find(")", k + 1)
        if close == -1:
            raise ParseError("unterminated tag group", open_offset + _byte_len(text[i:k]))
        group = text[k + 1 : close]
        cluster_ids = _parse_tag_group(group, open_offset + _byte_len(text[i : k + 1]))
        start = plain_bytes
        raw_mentions.append((start, start + _byte_len(surface), surface, cluster_ids))
        plain_parts.append(surface)
        plain_bytes += _byte_len(surface)
        byte_pos += _byte_len(text[i : close + 1])
        i = close + 1

    plain = "".join(plain_parts)
    sentences = split_sentences(plain)
    bounds: list[tuple[int, int]] = []
    pos = 0
    for s in sentences:
        bounds.append((pos, pos + _byte_len(s)))
        pos += _byte_len(s)

    def sentence_of(offset: int) -> int:
        for idx, (lo, hi) in enumerate(bounds):
            if lo <= offset < hi:
                return idx
        raise ParseError("mention outside any sentence", offset)

    mentions = tuple(
        TextualMention(
            mention_id=f"m{idx}",
            sentence_index=sentence_of(start),
            char_span=(start, end),
            surface=surface,
            cluster_ids=cluster_ids,
        )
        for idx, (start, end, surface, cluster_ids) in enumerate(raw_mentions)
    )
    return AnnotatedStory(story_id=story_id, sentences=tuple(sentences), mentions=mentions)


def render_annotated(story: AnnotatedStory) -> str:
    """Inverse of parse_annotated: re-insert mention tags into the text.

    Cluster lists render as "#a, #b" (single space after commas) in the
    mention's stored order.
    """
    text_bytes = story.text.encode("utf-8")
    out: list[str] = []
    pos = 0
    for m in story.mentions:
        start, end = m.char_span
        gap = text_bytes[pos:start].decode("utf-8")
        _check_renderable(gap, story.story_id)
        out.append(gap)
        following = text_bytes[end : end + 1]
        if following == b"(":
            raise ValidationError(
                "ambiguous_render",
                f"mention {m.mention_id} is directly followed by '(' in the text; "
                "the rendered form would not parse back",
                story.story_id,
            )
        tags = ", ".join(f"#{c}" for c in m.cluster_ids)
        out.append(f"[{m.surface}]({tags})")
        pos = end
    tail = text_bytes[pos:].decode("utf-8")
    _check_renderable(tail, story.story_id)
    out.append(tail)
    return "".join(out)


def _check_renderable(plain: str, story_id: str) -> None:
    if "[" in plain or "]" in plain:
        raise ValidationError(
            "unrenderable_text",
            "story text contains bracket characters outside mentions",
            story_id,
        )


def strip_annotations(text: str) -> str:
    """Plain text with all mention tags removed."""
    return parse_annotated(text).text


def textual_chains(story: AnnotatedStory) -> dict[str, tuple[str, ...]]:
    """Cluster id -> mention ids, ordered by (sentence, span).

    A plural mention contributes to every cluster it names.
    """
    return dict(story.chains)
