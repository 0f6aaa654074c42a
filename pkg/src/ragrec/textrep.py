"""Per-item textual embeddings: describe, embed title + description, concatenate.

The text channel of an item is ``e_text = [e_title || e_desc]`` where both
halves come from the embedding client.  Titles are first wrapped in a fixed
sentence template; descriptions are either generated by the LLM from the
item's basic info or, when generation is disabled, fall back to the same
fixed sentence.  Generated descriptions are cached in a JSON-lines file and
keyed by a template hash, so editing the prompt template invalidates the
cache.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import stores
from .errors import ContentError, ContractError, StageError
from .llm_client import EmbedRequest, GenRequest, LLMClient

logger = logging.getLogger(__name__)

DEFAULT_DESCRIBE_SYSTEM = (
    "You are a knowledgeable assistant that writes concise, factual item descriptions."
)

# The describe prompt keeps machine-readable "key: value" lines so offline
# clients can fill their fixed template from it.
DEFAULT_DESCRIBE_TEMPLATE = (
    "Write a detailed description of the following item, covering its key attributes "
    "and what kind of audience would enjoy it.\n"
    "Title: {title}\n"
    "{attribute_lines}"
)

DEFAULT_TITLE_TEMPLATE = "Here is a movie: {title}."


@dataclass(frozen=True)
class ItemBasicInfo:
    item_id: str
    title: str
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.title:
            raise ContractError(f"item {self.item_id!r} has an empty title")

    @staticmethod
    def from_record(record: Mapping) -> "ItemBasicInfo":
        attrs = {k: str(v) for k, v in record.items() if k not in ("id", "title")}
        return ItemBasicInfo(item_id=str(record["id"]), title=str(record.get("title", "")), attributes=attrs)


@dataclass(frozen=True)
class TextEmbedding:
    e_title: np.ndarray
    e_desc: np.ndarray
    e_text: np.ndarray


def assemble_text_embedding(e_title: np.ndarray, e_desc: np.ndarray) -> TextEmbedding:
    """Concatenate the title and description channels, title first."""
    e_title = np.asarray(e_title, dtype=np.float64)
    e_desc = np.asarray(e_desc, dtype=np.float64)
    if e_title.ndim != 1 or e_desc.ndim != 1 or e_title.shape != e_desc.shape:
        raise ContractError(
            f"title/description embeddings must share one dimension, got {e_title.shape} vs {e_desc.shape}"
        )
    if not (np.all(np.isfinite(e_title)) and np.all(np.isfinite(e_desc))):
        raise ContractError("embeddings must be finite")
    return TextEmbedding(e_title=e_title, e_desc=e_desc, e_text=np.concatenate([e_title, e_desc]))


class DescriptionCache:
    """JSON-lines description cache: one {item_id, description, template_hash} per line."""

    def __init__(self, path: str | Path | None):
        self._path = Path(path) if path else None
        self._entries: dict[str, tuple[str, int]] = {}
        if self._path is not None and self._path.exists():
            with open(self._path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    self._entries[obj["item_id"]] = (obj["description"], int(obj["template_hash"]))

    def get(self, item_id: str, thash: int) -> str | None:
        entry = self._entries.get(item_id)
        if entry is not None and entry[1] == thash:
            return entry[0]
        return None

    def put(self, item_id: str, description: str, thash: int) -> None:
        self._entries[item_id] = (description, thash)
        if self._path is None:
            return
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(
                {"item_id": item_id, "description": description, "template_hash": thash},
                sort_keys=True) + "\n")


def _attribute_lines(info: ItemBasicInfo) -> str:
    return "\n".join(f"{k}: {v}" for k, v in sorted(info.attributes.items()))


def describe_item(
    info: ItemBasicInfo,
    template: str,
    client: LLMClient | None,
    cache: DescriptionCache | None = None,
    fixed_template: str = DEFAULT_TITLE_TEMPLATE,
    system_prompt: str = DEFAULT_DESCRIBE_SYSTEM,
    max_tokens: int = 256,
) -> str:
    """Generate (or fetch from cache) the description text for one item.

    With ``client=None`` the fixed sentence template is used instead of LLM
    generation, which is the plain-text baseline form.
    """
    if client is None:
        return fixed_template.format(title=info.title)
    thash = stores.template_hash(template)
    if cache is not None:
        hit = cache.get(info.item_id, thash)
        if hit is not None:
            return hit
    try:
        prompt = template.format(title=info.title, attribute_lines=_attribute_lines(info))
    except (KeyError, IndexError) as exc:
        raise ContractError(f"describe template has an unresolved slot: {exc}") from None
    text = client.generate(GenRequest(system_prompt=system_prompt, user_prompt=prompt,
                                      max_tokens=max_tokens))
    if not text.strip():
        raise ContentError(f"empty description generated for item {info.item_id}")
    if cache is not None:
        cache.put(info.item_id, text, thash)
    return text


def combined_template_hash(describe_template: str, title_template: str, describe_enabled: bool) -> int:
    tag = "gen" if describe_enabled else "fixed"
    return stores.template_hash(f"{tag}\x1f{describe_template}\x1f{title_template}")


def build_text_store(
    items: Sequence[ItemBasicInfo],
    client: LLMClient,
    template: str = DEFAULT_DESCRIBE_TEMPLATE,
    title_template: str = DEFAULT_TITLE_TEMPLATE,
    out_path: str | Path | None = None,
    cache_path: str | Path | None = None,
    describe_enabled: bool = True,
    max_workers: int = 1,
) -> np.ndarray:
    """Embed every item and persist the (n_items, 2 * d_t) text store.

    Items must be passed in dense item-id order; rows keep that order.  The
    run is idempotent: when the store file already matches (count and
    template hash), it is read back with zero client calls.  Per-item
    failures are collected and retried once before the run fails.
    """
    ids = [info.item_id for info in items]
    if len(set(ids)) != len(ids):
        raise ContractError("item ids must be unique")
    d_t = client.config.embed_dim
    thash = combined_template_hash(template, title_template, describe_enabled)
    if out_path is not None and Path(out_path).exists():
        count, dim, existing_hash = stores.read_header(out_path)
        if count == len(items) and dim == 2 * d_t and existing_hash == thash:
            matrix, _ = stores.read_store(out_path)
            return matrix
    cache = DescriptionCache(cache_path)
    describe_client = client if describe_enabled else None

    matrix = np.zeros((len(items), 2 * d_t), dtype=np.float64)
    failures: dict[int, str] = {}

    def embed_one(idx: int) -> None:
        info = items[idx]
        description = describe_item(info, template, describe_client, cache=cache,
                                    fixed_template=title_template)
        e_title = client.embed_text(EmbedRequest(text=title_template.format(title=info.title),
                                                 model_tag=client.config.embed_model))
        e_desc = client.embed_text(EmbedRequest(text=description,
                                                model_tag=client.config.embed_model))
        matrix[idx] = assemble_text_embedding(e_title, e_desc).e_text

    def run_pass(indices):
        for idx in indices:
            try:
                embed_one(idx)
                failures.pop(idx, None)
            except Exception as exc:  # collected; run fails only after retry
                failures[idx] = f"{items[idx].item_id}: {exc}"

    all_indices = list(range(len(items)))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            def guarded(idx):
                try:
                    embed_one(idx)
                except Exception as exc:
                    failures[idx] = f"{items[idx].item_id}: {exc}"
            list(pool.map(guarded, all_indices))
    else:
        run_pass(all_indices)
    if failures:
        logger.warning("retrying %d failed items", len(failures))
        run_pass(sorted(failures))
    if failures:
        detail = "; ".join(failures[i] for i in sorted(failures)[:5])
        raise StageError(f"embed-text: {len(failures)} items failed after retry: {detail}")
    if out_path is not None:
        stores.write_store(out_path, matrix, template_hash_value=thash)
    return matrix.astype(np.float32)
