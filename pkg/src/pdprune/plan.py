"""Removal elements, stage plans, and the model views they induce."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import ConsistencyError
from .model import Block, TransformerModel

PRUNE = "prune"
DISTILL = "distill"


@dataclass(frozen=True, order=True)
class RemovalElement:
    """Removes exactly one block: a direct prune or a pair merged into one.

    ``source`` is the block a merged pair is initialised from (and whose layer
    id, hence KV cache slot, the merged block takes over).
    """

    blocks: tuple[int, ...]
    kind: str = PRUNE
    weight: float = field(default=0.0, compare=False)
    source: int | None = field(default=None, compare=False)

    @classmethod
    def prune(cls, i: int, r=None) -> "RemovalElement":
        return cls((i,), PRUNE, float(r[i]) if r is not None else 0.0, i)

    @classmethod
    def distill(cls, i: int, r=None) -> "RemovalElement":
        if r is None:
            return cls((i, i + 1), DISTILL, 0.0, i)
        # merged block starts from the less redundant block; ties go to i
        source = i if r[i] <= r[i + 1] else i + 1
        return cls((i, i + 1), DISTILL, 0.5 * (float(r[i]) + float(r[i + 1])), source)

    @property
    def first(self) -> int:
        return self.blocks[0]

    def __str__(self):
        if self.kind == PRUNE:
            return f"prune({self.blocks[0]})"
        return f"distill({self.blocks[0]},{self.blocks[1]})"

    def to_json(self) -> dict:
        return {"kind": self.kind, "blocks": list(self.blocks), "weight": self.weight,
                "source": self.source}

    @classmethod
    def from_json(cls, doc) -> "RemovalElement":
        return cls(tuple(doc["blocks"]), doc["kind"], float(doc.get("weight", 0.0)),
                   doc.get("source", doc["blocks"][0]))


def elements_disjoint(elements: Iterable[RemovalElement]) -> bool:
    seen: set[int] = set()
    for e in elements:
        if seen.intersection(e.blocks):
            return False
        seen.update(e.blocks)
    return True


def sort_elements(elements: Iterable[RemovalElement]) -> tuple[RemovalElement, ...]:
    return tuple(sorted(elements, key=lambda e: e.blocks))


def surviving_layer_ids(layer_ids: Iterable[int], elements: Iterable[RemovalElement]) -> list[int]:
    """Layer ids left after ``elements``; a distilled pair keeps its source id."""
    gone: set[int] = set()
    for e in elements:
        gone.update(e.blocks)
        if e.kind == DISTILL:
            gone.discard(e.source)
    return [lid for lid in layer_ids if lid not in gone]


@dataclass(frozen=True)
class StagePlan:
    prefill_removals: tuple[RemovalElement, ...]
    decode_removals: tuple[RemovalElement, ...]
    threshold: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "prefill_removals", sort_elements(self.prefill_removals))
        object.__setattr__(self, "decode_removals", sort_elements(self.decode_removals))

    @classmethod
    def unified(cls, elements, threshold: float = 0.03) -> "StagePlan":
        elements = tuple(elements)
        return cls(elements, elements, threshold)

    @classmethod
    def empty(cls) -> "StagePlan":
        return cls((), ())

    def check(self) -> None:
        if not set(self.prefill_removals) <= set(self.decode_removals):
            raise ConsistencyError("prefill removals must be a subset of decode removals")
        if not elements_disjoint(self.decode_removals):
            raise ConsistencyError("removal elements overlap")

    def decode_only(self) -> tuple[RemovalElement, ...]:
        pre = set(self.prefill_removals)
        return tuple(e for e in self.decode_removals if e not in pre)


def as_stage_plan(plan) -> StagePlan:
    if isinstance(plan, StagePlan):
        return plan
    return StagePlan.unified(tuple(plan))


def build_view(model: TransformerModel, elements: Iterable[RemovalElement],
               merged: Mapping[tuple[int, int], Block] | None = None,
               strict: bool = False) -> TransformerModel:
    """Apply removal elements to ``model``.

    Pruned blocks are skipped; a distilled pair is replaced by its merged
    block, which keeps the source's layer id. Without a trained block in
    ``merged`` the source block itself stands in, unless ``strict``.
    """
    elements = list(elements)
    if not elements_disjoint(elements):
        raise ConsistencyError("removal elements overlap")
    drop: set[int] = set()
    replace_at: dict[int, tuple[int, Block]] = {}
    for e in elements:
        for b in e.blocks:
            if b not in model.layer_ids:
                raise ValueError(f"block {b} is not part of the model")
        drop.update(e.blocks)
        if e.kind == DISTILL:
            if merged is not None and e.blocks in merged:
                blk = merged[e.blocks]
            elif strict:
                raise ConsistencyError(f"missing merged block for {e}")
            else:
                blk = model.block(e.source)
            replace_at[e.blocks[0]] = (e.source, blk)
    layers = []
    for lid, blk in zip(model.layer_ids, model.blocks):
        if lid in replace_at:
            layers.append(replace_at[lid])
        elif lid not in drop:
            layers.append((lid, blk))
    return model.with_layers(layers)


def stage_views(model: TransformerModel, plan, merged=None,
                strict: bool = False) -> tuple[TransformerModel, TransformerModel]:
    plan = as_stage_plan(plan)
    plan.check()
    return (build_view(model, plan.prefill_removals, merged, strict),
            build_view(model, plan.decode_removals, merged, strict))
