"""Prompt templates and rendering with tracked mask positions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import WordPair
from .encoder.vocab import MASK, Vocabulary

HEAD_SLOT, TAIL_SLOT = "[h]", "[t]"

_BUILTIN = (
    "Today, I finally discovered the relation between [h] and [t] : [h] is the <mask> of [t]",
    "Today, I finally discovered the relation between [h] and [t] : [t] is [h]'s <mask>",
    "Today, I finally discovered the relation between [h] and [t] : <mask>",
    "I wasn’t aware of this relationship, but I just read in the encyclopedia that [h] is the <mask> of [t]",
    "I wasn’t aware of this relationship, but I just read in the encyclopedia that [t] is [h]’s <mask>",
)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    text: str

    def __post_init__(self):
        missing = [m for m in (HEAD_SLOT, TAIL_SLOT, MASK) if m not in self.text]
        if missing:
            raise TemplateError(f"template {self.id} lacks marker(s) {missing}")


@dataclass(frozen=True)
class RenderedPrompt:
    token_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]
    surface: str


def builtin_templates() -> list[PromptTemplate]:
    return [PromptTemplate(i, text) for i, text in enumerate(_BUILTIN, start=1)]


def get_template(template_id: int, templates=None) -> PromptTemplate:
    for tpl in templates or builtin_templates():
        if tpl.id == template_id:
            return tpl
    raise TemplateError(f"no template with id {template_id}")


def load_templates(path) -> list[PromptTemplate]:
    """One template per line; blank lines and ``#`` comments are skipped."""
    templates = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            templates.append(PromptTemplate(len(templates) + 1, line))
    if not templates:
        raise TemplateError(f"{path}: no templates")
    return templates


def fill(template: PromptTemplate, pair: WordPair) -> str:
    # slots are swapped via a placeholder so a word containing "[t]" cannot be re-substituted
    text = template.text.replace(HEAD_SLOT, "\0h\0").replace(TAIL_SLOT, "\0t\0")
    return text.replace("\0h\0", pair.head).replace("\0t\0", pair.tail)


def mask_positions_of(token_ids, vocab: Vocabulary) -> tuple[int, ...]:
    return tuple(i for i, tok in enumerate(token_ids) if tok == vocab.mask_id)


def render(template: PromptTemplate, pair: WordPair, vocab: Vocabulary) -> RenderedPrompt:
    if MASK in pair.head or MASK in pair.tail:
        raise TemplateError(f"pair {pair} contains the mask marker")
    surface = fill(template, pair)
    ids = tuple(vocab.encode(surface, add_delimiters=True))
    masks = mask_positions_of(ids, vocab)
    if not masks:
        raise TemplateError(f"rendered prompt for template {template.id} has no mask token")
    return RenderedPrompt(ids, masks, surface)
