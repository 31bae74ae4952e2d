"""Construction, enrichment, validation and persistence of the bag of descriptions.

Pipeline for one sequence (first frame with its target box):

1. embed the frame and match it against the class and attribute dictionaries;
2. ask the generative service for a free-form description of the target;
3. enrich with synonyms, token perturbations, task phrases, their
   concatenation and a short concept name;
4. keep only descriptions whose text embedding is close enough to the frame
   embedding, regenerating rejected service output a bounded number of times;
5. drop manually excluded texts; every kept entry is stored pre-encoded.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .embedding import argmax, as_vector, cosine_sims
from .encoders import EncoderBackend, ImagePatch, encode_image, encode_text, image_digest
from .errors import BagConstructionError, DegenerateInputError, DimensionMismatchError, SchemaError
from .generative import GenerativeClient
from .geometry import draw_box
from .persist import load_container, save_container

log = logging.getLogger(__name__)

KINDS = ("class", "attribute", "generated", "semantic_context")
PROVENANCES = ("dictionary-match", "service", "synonym", "perturbation", "task-phrase", "concept")
# provenances whose text came from the generative service and can be re-requested
REGENERABLE = ("service", "task-phrase", "concept")


@dataclass(frozen=True)
class BagConfig:
    tau_val: float = 0.8
    tau_syn: float = 0.5
    alpha: float = 0.3
    n_synonyms: int = 10
    top_k_attributes: int = 4
    regen_rounds: int = 2
    n_task_phrases: int = 10
    max_concept_words: int = 5
    draw_bbox: bool = True
    seed: int = 0


class Dictionary:
    """Ordered, duplicate-free vocabulary with one pre-encoded unit row per entry."""

    def __init__(self, entries: Sequence[str], embeddings: np.ndarray, kind: str):
        if kind not in ("class", "attribute"):
            raise ValueError(f"dictionary kind must be 'class' or 'attribute', got {kind!r}")
        entries = list(entries)
        if len(set(entries)) != len(entries):
            raise ValueError("dictionary entries must be unique")
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(entries):
            raise DimensionMismatchError(f"{len(entries)} entries but embeddings of shape {emb.shape}")
        self.entries = entries
        self.embeddings = emb
        self.kind = kind

    def __len__(self):
        return len(self.entries)

    @classmethod
    def encode(cls, entries: Sequence[str], backend: EncoderBackend, kind: str) -> "Dictionary":
        entries = list(entries)
        emb = np.stack([encode_text(backend, e) for e in entries]) if entries else np.zeros((0, backend.embed_dim))
        return cls(entries, emb, kind)


def read_dictionary_lines(path: str | Path) -> list[str]:
    """One entry per line; ``#`` starts a comment; blank lines and repeats are skipped."""
    seen, out = set(), []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line and line not in seen:
            seen.add(line)
            out.append(line)
    return out


def load_dictionary(path: str | Path, backend: EncoderBackend, kind: str) -> Dictionary:
    return Dictionary.encode(read_dictionary_lines(path), backend, kind)


class Lexicon(Protocol):
    def synonyms(self, word: str) -> list[tuple[str, float]]:
        """Candidate synonyms with similarity scores, in lexicon order."""
        ...


class JsonLexicon:
    """Offline lexicon: ``{word: [{"synonym": str, "score": float}, ...]}``."""

    def __init__(self, table: Mapping[str, list] | None = None):
        self.table: dict[str, list[tuple[str, float]]] = {}
        for word, items in (table or {}).items():
            pairs = []
            for item in items:
                if isinstance(item, Mapping):
                    pairs.append((str(item["synonym"]), float(item["score"])))
                else:
                    syn, score = item
                    pairs.append((str(syn), float(score)))
            self.table[word.lower()] = pairs

    @classmethod
    def load(cls, path: str | Path) -> "JsonLexicon":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def synonyms(self, word: str) -> list[tuple[str, float]]:
        return list(self.table.get(word.lower(), ()))


@dataclass(eq=False)
class DescriptionEntry:
    kind: str
    text: str
    embedding: np.ndarray
    provenance: str
    sim_to_image: float | None = None
    # (prompt, line index) of service-generated text; never persisted
    origin: tuple[str, int] | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, DescriptionEntry):
            return NotImplemented
        return (self.kind == other.kind and self.text == other.text
                and self.provenance == other.provenance
                and self.sim_to_image == other.sim_to_image
                and np.array_equal(self.embedding, other.embedding))


@dataclass(eq=False)
class BagOfDescriptions:
    entries: list[DescriptionEntry]
    source_frame_digest: str = ""
    config: dict = field(default_factory=dict)
    discarded: list[DescriptionEntry] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, BagOfDescriptions):
            return NotImplemented
        return (self.source_frame_digest == other.source_frame_digest
                and self.config == other.config and self.entries == other.entries)

    @property
    def embeddings(self) -> np.ndarray:
        if not self.entries:
            raise DegenerateInputError("bag is empty")
        return np.stack([e.embedding for e in self.entries])

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    def counts(self) -> dict[str, int]:
        return {k: sum(e.kind == k for e in self.entries) for k in KINDS}


def make_entry(backend: EncoderBackend, kind: str, text: str, provenance: str,
               origin: tuple[str, int] | None = None) -> DescriptionEntry:
    return DescriptionEntry(kind, text, encode_text(backend, text), provenance, None, origin)


def match_dictionary(image_feat, dictionary: Dictionary) -> tuple[int, float]:
    """Best dictionary row by cosine similarity; ties go to the lowest index."""
    if len(dictionary) == 0:
        raise DegenerateInputError("cannot match against an empty dictionary")
    sims = cosine_sims(image_feat, dictionary.embeddings)
    i = argmax(sims)
    return i, float(sims[i])


def match_top_k(image_feat, dictionary: Dictionary, k: int) -> list[tuple[int, float]]:
    if len(dictionary) == 0:
        raise DegenerateInputError("cannot match against an empty dictionary")
    sims = cosine_sims(image_feat, dictionary.embeddings)
    order = np.argsort(-sims, kind="stable")[: max(1, k)]
    return [(int(i), float(sims[i])) for i in order]


def retrieve_synonyms(word: str, lex: Lexicon, tau_syn: float = 0.5, n: int = 10) -> list[str]:
    """First ``n`` lexicon synonyms scoring at least ``tau_syn``; ``[word]`` if there are none."""
    if n < 1:
        raise ValueError("n must be >= 1")
    related = [syn for syn, score in lex.synonyms(word) if score >= tau_syn]
    return related[:n] if related else [word]


_EDGE_PUNCT = re.compile(r"^\W+|\W+$", re.UNICODE)


def perturb(tokens: Sequence[str], alpha: float, lex: Lexicon, rng: np.random.Generator) -> list[str]:
    """Replace each token by a random synonym with probability ``alpha``.

    One uniform draw is consumed per token whether or not it has synonyms, so
    the random stream (and hence the output) only depends on the token count.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = []
    for tok in tokens:
        u = rng.random()
        candidates = lex.synonyms(_EDGE_PUNCT.sub("", tok)) if tok else []
        if u < alpha and candidates:
            out.append(candidates[int(rng.integers(len(candidates)))][0])
        else:
            out.append(tok)
    return out


def _phrase_lines(reply: str) -> list[str]:
    lines = []
    for raw in reply.splitlines():
        line = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", raw).strip().strip('"').strip()
        if line:
            lines.append(line)
    return lines


def enrich_semantic_context(class_name: str, attributes: Sequence[str], description: str,
                            client: GenerativeClient, lex: Lexicon, cfg: BagConfig,
                            backend: EncoderBackend, patch: ImagePatch,
                            rng: np.random.Generator,
                            base_texts: Sequence[str] | None = None) -> list[DescriptionEntry]:
    """Semantic/contextual entries, in order: synonyms, perturbed copies, task
    phrases, their concatenation, and the concept name.

    ``base_texts`` are the texts that get perturbed; by default the class name,
    the attributes and the description.
    """
    entries: list[DescriptionEntry] = []
    sc = "semantic_context"

    for syn in retrieve_synonyms(class_name, lex, cfg.tau_syn, cfg.n_synonyms):
        entries.append(make_entry(backend, sc, syn, "synonym"))

    if base_texts is None:
        base_texts = [class_name, *attributes, description]
    perturbed = [" ".join(perturb(t.split(), cfg.alpha, lex, rng)) for t in base_texts]
    for text in perturbed:
        entries.append(make_entry(backend, sc, text, "perturbation"))

    task_prompt = client.templates.task.format(n=cfg.n_task_phrases, cls=class_name)
    phrases = _phrase_lines(client.generate(patch, task_prompt))[: cfg.n_task_phrases]
    for i, phrase in enumerate(phrases):
        entries.append(make_entry(backend, sc, phrase, "task-phrase", (task_prompt, i)))

    combined = [t for t in perturbed + phrases if t.strip()]
    if combined:
        entries.append(make_entry(backend, sc, "; ".join(combined), "task-phrase"))

    concept_prompt = client.templates.concept.format(description=description)
    concept = _concept_name(client.generate(patch, concept_prompt), cfg.max_concept_words)
    if concept:
        entries.append(make_entry(backend, sc, concept, "concept", (concept_prompt, 0)))
    return entries


def _concept_name(reply: str, max_words: int) -> str:
    lines = _phrase_lines(reply)
    words = lines[0].split() if lines else []
    if len(words) > max_words:
        log.warning("concept name %r has %d words; truncated to %d", " ".join(words), len(words), max_words)
        words = words[:max_words]
    return " ".join(words).strip(" .")


def validate_bag(raw: BagOfDescriptions, image_feat, tau_val: float = 0.8) -> BagOfDescriptions:
    """Keep entries whose cosine similarity to the image is at least ``tau_val``.

    Rejected entries are returned in ``discarded`` (with their similarity).
    """
    if not raw.entries:
        raise DegenerateInputError("cannot validate an empty bag")
    feat = as_vector(image_feat, "image_feat")
    sims = cosine_sims(feat, raw.embeddings)
    kept, dropped = [], []
    for entry, s in zip(raw.entries, sims):
        scored = dataclasses.replace(entry, sim_to_image=float(s))
        (kept if s >= tau_val else dropped).append(scored)
    if not kept:
        best = max(e.sim_to_image for e in dropped)
        raise BagConstructionError(
            f"every description was rejected at tau_val={tau_val} (best similarity {best:.4f})",
            stage="validate", best_similarity=best)
    return BagOfDescriptions(kept, raw.source_frame_digest, dict(raw.config), dropped)


def _order(entries: list[DescriptionEntry]) -> list[DescriptionEntry]:
    return sorted(entries, key=lambda e: KINDS.index(e.kind))


def build_bag(first_frame: ImagePatch, dicts: Mapping[str, Dictionary], client: GenerativeClient,
              lex: Lexicon, backend: EncoderBackend, cfg: BagConfig = BagConfig(),
              exclusions: Sequence[str] = ()) -> BagOfDescriptions:
    """Run the whole construction for one first frame (which must carry the target box)."""
    if first_frame.bbox is None:
        raise BagConstructionError("first frame has no target box", stage="input")
    for key in ("class", "attribute"):
        if key not in dicts or len(dicts[key]) == 0:
            raise BagConstructionError(f"{key} dictionary missing or empty", stage="input")
    rng = np.random.default_rng(cfg.seed)

    shown = draw_box(first_frame.pixels, first_frame.bbox) if cfg.draw_bbox else first_frame.pixels
    image_feat = encode_image(backend, ImagePatch(shown))

    ci, _ = match_dictionary(image_feat, dicts["class"])
    class_name = dicts["class"].entries[ci]
    attr_names = [dicts["attribute"].entries[i] for i, _ in
                  match_top_k(image_feat, dicts["attribute"], cfg.top_k_attributes)]

    desc_prompt = client.templates.description
    description = client.generate(first_frame, desc_prompt).strip()

    entries = [make_entry(backend, "class", class_name, "dictionary-match")]
    entries += [make_entry(backend, "attribute", a, "dictionary-match") for a in attr_names]
    if description:
        entries.append(make_entry(backend, "generated", description, "service", (desc_prompt, 0)))
    entries += enrich_semantic_context(class_name, attr_names, description or class_name, client, lex,
                                       cfg, backend, first_frame, rng)

    snapshot = {**dataclasses.asdict(cfg), "backend": repr(backend)}
    raw = BagOfDescriptions(entries, image_digest(first_frame.pixels), snapshot)
    bag = _validate_with_regeneration(raw, image_feat, cfg, client, backend, first_frame)

    if exclusions:
        excluded = set(exclusions)
        kept = [e for e in bag.entries if e.text not in excluded]
        if not kept:
            raise BagConstructionError("manual exclusions removed every description", stage="review")
        bag = BagOfDescriptions(kept, bag.source_frame_digest, bag.config, bag.discarded)
    bag.entries = _order(bag.entries)
    return bag


def _validate_with_regeneration(raw: BagOfDescriptions, image_feat, cfg: BagConfig,
                                client: GenerativeClient, backend: EncoderBackend,
                                patch: ImagePatch) -> BagOfDescriptions:
    # Validation tracks positions so regenerated text lands where the rejected one was.
    slots: list[DescriptionEntry | None] = list(raw.entries)
    pending = list(range(len(slots)))
    discarded: list[DescriptionEntry] = []
    feat = as_vector(image_feat)
    for round_no in range(cfg.regen_rounds + 1):
        sims = cosine_sims(feat, np.stack([slots[i].embedding for i in pending]))
        retry = []
        for i, s in zip(pending, sims):
            entry = dataclasses.replace(slots[i], sim_to_image=float(s))
            if s >= cfg.tau_val:
                slots[i] = entry
            else:
                discarded.append(entry)
                slots[i] = None
                if entry.origin is not None and entry.provenance in REGENERABLE:
                    retry.append((i, entry))
        if not retry or round_no == cfg.regen_rounds:
            break
        pending = []
        for i, entry in retry:
            prompt, line = entry.origin
            again = client.templates.regenerate.format(prompt=prompt, round=round_no + 1)
            reply = client.generate(patch, again)
            lines = _phrase_lines(reply)
            if entry.provenance == "concept":
                text = _concept_name(reply, cfg.max_concept_words)
            elif entry.provenance == "task-phrase":
                text = lines[min(line, len(lines) - 1)] if lines else ""
            else:
                text = reply.strip()
            if text:
                slots[i] = make_entry(backend, entry.kind, text, entry.provenance, entry.origin)
                pending.append(i)
        if not pending:
            break
    kept = [e for e in slots if e is not None]
    if not kept:
        best = max(e.sim_to_image for e in discarded)
        raise BagConstructionError(
            f"every description was rejected at tau_val={cfg.tau_val} (best similarity {best:.4f})",
            stage="validate", best_similarity=best)
    return BagOfDescriptions(kept, raw.source_frame_digest, raw.config, discarded)


def save_bag(bag: BagOfDescriptions, path: str | Path) -> None:
    doc = {
        "frame_digest": bag.source_frame_digest,
        "config": bag.config,
        "entries": [
            {
                "kind": e.kind,
                "text": e.text,
                "provenance": e.provenance,
                "sim_to_image": e.sim_to_image,
                "embedding": [float(x) for x in e.embedding],
            }
            for e in bag.entries
        ],
    }
    save_container(path, doc)


def load_bag(path: str | Path) -> BagOfDescriptions:
    doc = load_container(path)
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list):
        raise SchemaError("bag file has no entry list")
    entries, dim = [], None
    for i, item in enumerate(raw_entries):
        try:
            kind, text, prov = item["kind"], item["text"], item["provenance"]
            emb = np.asarray(item["embedding"], dtype=np.float64)
            sim = item.get("sim_to_image")
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"entry {i}: malformed ({exc})", index=i) from exc
        if kind not in KINDS:
            raise SchemaError(f"entry {i}: unknown kind {kind!r}", index=i)
        if prov not in PROVENANCES:
            raise SchemaError(f"entry {i}: unknown provenance {prov!r}", index=i)
        if not isinstance(text, str) or emb.ndim != 1 or emb.size == 0:
            raise SchemaError(f"entry {i}: bad text or embedding", index=i)
        if dim is not None and emb.size != dim:
            raise SchemaError(f"entry {i}: embedding dimension {emb.size} != {dim}", index=i)
        dim = emb.size
        entries.append(DescriptionEntry(kind, text, emb, prov, None if sim is None else float(sim)))
    return BagOfDescriptions(entries, str(doc.get("frame_digest", "")), dict(doc.get("config", {})))
