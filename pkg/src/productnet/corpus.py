"""Data model and persistence: product pool, taxonomy, label log, embedding matrices.

Everything on disk is plain text (JSON lines, taxonomy paths) except embedding
matrices, which use a small binary container so round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

# The seven catalog text fields, in canonical order.
TEXT_FIELDS = (
    "title",
    "description",
    "bullets",
    "brand",
    "keywords_0",
    "keywords_1",
    "keywords_2",
)

LABEL_SOURCES = (
    "random",
    "keyword",
    "knn",
    "active_lr",
    "active_nb",
    "active_mlp",
    "master",
    "adhoc",
)

POLARITIES = ("positive", "negative")

EMBEDDING_MAGIC = b"PNE1"


class CorpusError(Exception):
    """Base for ingestion/persistence failures."""


class RecordParseError(CorpusError):
    """Malformed pool or label record; carries the 1-based line number."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class IngestionError(CorpusError):
    """Pool-level problem such as a duplicate product id."""


class TaxonomyError(CorpusError):
    """Bad taxonomy file: empty, malformed, or duplicate paths."""


class UnknownReferenceError(CorpusError):
    """A record references a product or leaf that does not exist."""


class EmbeddingFormatError(CorpusError):
    """Embedding file does not match the binary layout."""


def now_ms() -> int:
    return int(time.time() * 1000)


# ---------------------------------------------------------------------------
# Products


@dataclass(frozen=True)
class Product:
    id: str
    title: str = ""
    description: str = ""
    bullets: tuple[str, ...] = ()
    brand: str = ""
    keywords: tuple[tuple[str, ...], ...] = ((), (), ())
    image_embedding_id: str | None = None
    image_url: str | None = None
    gold_leaf: str | None = None  # simulation only; stripped from annotator-facing APIs

    def field_text(self, name: str) -> str:
        """Raw text of one of the seven catalog fields (lists joined by spaces)."""
        if name == "bullets":
            return " ".join(self.bullets)
        if name.startswith("keywords_"):
            return " ".join(self.keywords[int(name[-1])])
        return getattr(self, name)

    def all_text(self) -> str:
        return " ".join(self.field_text(f) for f in TEXT_FIELDS)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "title": self.title,
            "description": self.description,
            "bullets": list(self.bullets),
            "brand": self.brand,
            "keywords": [list(ks) for ks in self.keywords],
        }
        if self.image_embedding_id is not None:
            rec["image_embedding_id"] = self.image_embedding_id
        if self.image_url is not None:
            rec["image_url"] = self.image_url
        if self.gold_leaf is not None:
            rec["gold_leaf"] = self.gold_leaf
        return rec

    def public_record(self) -> dict:
        rec = self.to_record()
        rec.pop("gold_leaf", None)
        return rec


def _string_list(value, what, line_number):
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise RecordParseError(f"{what} must be a list of strings", line_number)
    return tuple(value)


def parse_product_record(line: str, line_number: int | None = None) -> Product:
    """Parse one pool-file record. Missing text fields default to empty; unknown keys are ignored."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"invalid JSON ({exc.msg})", line_number) from exc
    if not isinstance(obj, dict):
        raise RecordParseError("record must be an object", line_number)
    pid = obj.get("id")
    if not isinstance(pid, str) or not pid:
        raise RecordParseError("missing or empty 'id'", line_number)

    keywords = obj.get("keywords")
    if keywords is None:
        kw = ((), (), ())
    else:
        if not isinstance(keywords, list) or len(keywords) != 3:
            raise RecordParseError("'keywords' must be an array of 3 arrays", line_number)
        kw = tuple(_string_list(ks, "keywords entry", line_number) for ks in keywords)

    def text(key):
        value = obj.get(key, "")
        if value is None:
            return ""
        if not isinstance(value, str):
            raise RecordParseError(f"'{key}' must be a string", line_number)
        return value

    return Product(
        id=pid,
        title=text("title"),
        description=text("description"),
        bullets=_string_list(obj.get("bullets"), "'bullets'", line_number),
        brand=text("brand"),
        keywords=kw,
        image_embedding_id=obj.get("image_embedding_id"),
        image_url=obj.get("image_url"),
        gold_leaf=obj.get("gold_leaf"),
    )


class Pool:
    """Immutable-after-load collection of products with unique ids."""

    def __init__(self, products=()):
        self._products: dict[str, Product] = {}
        for p in products:
            self.add(p)

    def add(self, product: Product):
        if product.id in self._products:
            raise IngestionError(f"duplicate product id {product.id!r}")
        self._products[product.id] = product

    @property
    def ids(self) -> list[str]:
        return list(self._products)

    def __len__(self):
        return len(self._products)

    def __iter__(self):
        return iter(self._products.values())

    def __contains__(self, pid):
        return pid in self._products

    def __getitem__(self, pid) -> Product:
        try:
            return self._products[pid]
        except KeyError:
            raise UnknownReferenceError(f"unknown product {pid!r}") from None

    def get(self, pid):
        return self._products.get(pid)


def load_pool(path) -> Pool:
    pool = Pool()
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            pool.add(parse_product_record(line, line_number=i))
    return pool


def write_pool(path, products):
    with open(path, "w", encoding="utf-8") as fh:
        for p in products:
            fh.write(json.dumps(p.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Taxonomy

PATH_SEPARATOR = " > "


def normalize_path(path: str) -> str:
    """Leaf id for a full category path: lowercased, separators collapsed to '/'."""
    parts = [part.strip() for part in path.split(">")]
    return "/".join(part.lower() for part in parts if part)


@dataclass(frozen=True)
class TaxonomyNode:
    name: str
    path: str
    leaf_id: str
    children: tuple["TaxonomyNode", ...]

    @property
    def is_leaf(self) -> bool:
        return not self.children


class Taxonomy:
    """Category tree parsed from full-path lines; leaves are the annotation targets."""

    def __init__(self, paths: list[str]):
        if not paths:
            raise TaxonomyError("taxonomy is empty")
        self.paths = list(paths)
        seen = set()
        for p in self.paths:
            norm = normalize_path(p)
            if norm in seen:
                raise TaxonomyError(f"duplicate path {p!r}")
            seen.add(norm)
        self._children: dict[str, dict] = {}
        for p in self.paths:
            node = self._children
            for part in (s.strip() for s in p.split(">")):
                if not part:
                    raise TaxonomyError(f"malformed path {p!r}")
                node = node.setdefault(part, {})
        self.roots = tuple(self._build(name, sub, "") for name, sub in self._children.items())
        self._leaves: dict[str, TaxonomyNode] = {}
        self._collect_leaves(self.roots)

    def _build(self, name, sub, prefix) -> TaxonomyNode:
        path = f"{prefix}{PATH_SEPARATOR}{name}" if prefix else name
        children = tuple(self._build(n, s, path) for n, s in sub.items())
        return TaxonomyNode(name=name, path=path, leaf_id=normalize_path(path), children=children)

    def _collect_leaves(self, nodes):
        for node in nodes:
            if node.is_leaf:
                self._leaves[node.leaf_id] = node
            else:
                self._collect_leaves(node.children)

    @property
    def leaf_ids(self) -> list[str]:
        return list(self._leaves)

    def has_leaf(self, leaf_id: str) -> bool:
        return leaf_id in self._leaves

    def leaf(self, leaf_id: str) -> TaxonomyNode:
        try:
            return self._leaves[leaf_id]
        except KeyError:
            raise UnknownReferenceError(f"unknown leaf {leaf_id!r}") from None

    def serialize(self) -> str:
        return "\n".join(self.paths) + "\n"

    def to_tree(self) -> list[dict]:
        def node_dict(node):
            return {
                "name": node.name,
                "leaf_id": node.leaf_id,
                "is_leaf": node.is_leaf,
                "children": [node_dict(c) for c in node.children],
            }

        return [node_dict(r) for r in self.roots]


def parse_taxonomy(text: str) -> Taxonomy:
    lines = [line.strip() for line in text.splitlines()]
    return Taxonomy([line for line in lines if line])


def load_taxonomy(path) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


# ---------------------------------------------------------------------------
# Label log


@dataclass(frozen=True)
class LabelRecord:
    product_id: str
    leaf_id: str
    polarity: str
    annotator: str
    source: str
    timestamp: int
    auditor: str | None = None

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"invalid polarity {self.polarity!r}")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"invalid source {self.source!r}")

    def to_json(self) -> str:
        rec = {
            "product_id": self.product_id,
            "leaf_id": self.leaf_id,
            "polarity": self.polarity,
            "annotator": self.annotator,
            "source": self.source,
            "timestamp": self.timestamp,
        }
        if self.auditor is not None:
            rec["auditor"] = self.auditor
        return json.dumps(rec, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str, line_number=None) -> "LabelRecord":
        try:
            obj = json.loads(line)
            return cls(
                product_id=obj["product_id"],
                leaf_id=obj["leaf_id"],
                polarity=obj["polarity"],
                annotator=obj["annotator"],
                source=obj["source"],
                timestamp=int(obj["timestamp"]),
                auditor=obj.get("auditor"),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise RecordParseError(f"bad label record: {exc}", line_number) from exc


class LabelStore:
    """Append-only label log with last-write-wins effective labels per (product, leaf).

    Appends are serialized through an internal lock and flushed to disk before
    they are acknowledged; readers see a consistent snapshot.
    """

    def __init__(self, pool: Pool, taxonomy: Taxonomy, path=None):
        self.pool = pool
        self.taxonomy = taxonomy
        self.path = os.fspath(path) if path is not None else None
        self._lock = threading.Lock()
        self.records: list[LabelRecord] = []
        self._effective: dict[tuple[str, str], LabelRecord] = {}
        self._fh = None
        if self.path is not None:
            if os.path.exists(self.path):
                with open(self.path, encoding="utf-8") as fh:
                    for i, line in enumerate(fh, start=1):
                        if line.strip():
                            self._apply(LabelRecord.from_json(line, line_number=i))
            self._fh = open(self.path, "a", encoding="utf-8")

    def _apply(self, record: LabelRecord):
        self.records.append(record)
        self._effective[(record.product_id, record.leaf_id)] = record

    def append(self, record: LabelRecord):
        """Validate, durably append, then apply. Raises without side effects on bad input."""
        with self._lock:
            if record.product_id not in self.pool:
                raise UnknownReferenceError(f"unknown product {record.product_id!r}")
            if not self.taxonomy.has_leaf(record.leaf_id):
                raise UnknownReferenceError(f"unknown leaf {record.leaf_id!r}")
            if self._fh is not None:
                self._fh.write(record.to_json() + "\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self._apply(record)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def effective(self) -> dict[tuple[str, str], str]:
        with self._lock:
            return {pair: rec.polarity for pair, rec in self._effective.items()}

    def effective_record(self, product_id, leaf_id) -> LabelRecord | None:
        return self._effective.get((product_id, leaf_id))

    def leaf_labels(self, leaf_id: str) -> tuple[list[str], list[str]]:
        """Effective (positives, negatives) for a leaf, each sorted by product id."""
        pos, neg = [], []
        with self._lock:
            for (pid, leaf), rec in self._effective.items():
                if leaf != leaf_id:
                    continue
                (pos if rec.polarity == "positive" else neg).append(pid)
        return sorted(pos), sorted(neg)

    def labeled_ids(self, leaf_id: str) -> set[str]:
        pos, neg = self.leaf_labels(leaf_id)
        return set(pos) | set(neg)

    def gold_snapshot(self) -> dict[str, tuple[list[str], list[str]]]:
        """Per-leaf effective positives/negatives for every leaf with at least one label."""
        snapshot: dict[str, tuple[list[str], list[str]]] = {}
        with self._lock:
            leaves = {leaf for (_, leaf) in self._effective}
        for leaf in sorted(leaves):
            snapshot[leaf] = self.leaf_labels(leaf)
        return snapshot


def export_gold(pool: Pool, store: LabelStore, out_dir) -> dict[str, dict[str, int]]:
    """Write the effective gold dataset: a pool-format product file plus a label sidecar.

    Returns per-leaf counts of effective positives and negatives.
    """
    os.makedirs(out_dir, exist_ok=True)
    snapshot = store.gold_snapshot()
    counts = {}
    labeled_products: dict[str, Product] = {}
    with open(os.path.join(out_dir, "gold_labels.jsonl"), "w", encoding="utf-8") as fh:
        for leaf, (pos, neg) in snapshot.items():
            counts[leaf] = {"pos": len(pos), "neg": len(neg)}
            for pid in pos + neg:
                labeled_products[pid] = pool[pid]
                fh.write(store.effective_record(pid, leaf).to_json() + "\n")
    write_pool(
        os.path.join(out_dir, "gold_products.jsonl"),
        [labeled_products[pid] for pid in sorted(labeled_products)],
    )
    return counts


# ---------------------------------------------------------------------------
# Embedding matrices


class EmbeddingMatrix:
    """Ordered product ids plus a row-major float32 matrix, one row per id."""

    def __init__(self, ids, values):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d matrix")
        if len(ids) != values.shape[0]:
            raise ValueError("row count must equal id count")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding values must be finite")
        self.ids = list(ids)
        self.values = values
        self._index = {pid: i for i, pid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate ids in embedding matrix")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return pid in self._index

    def row(self, pid) -> np.ndarray:
        try:
            return self.values[self._index[pid]]
        except KeyError:
            raise UnknownReferenceError(f"no embedding row for {pid!r}") from None

    def index_of(self, pid) -> int:
        return self._index[pid]


def ids_sidecar(path) -> str:
    return os.fspath(path) + ".ids"


def write_embeddings(path, matrix: EmbeddingMatrix):
    """Binary layout: magic 'PNE1', u32 LE count, u32 LE dim, count*dim f32 LE row-major."""
    values = matrix.values
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to write non-finite embedding values")
    payload = values.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", len(matrix), matrix.dim))
        fh.write(payload)
    with open(ids_sidecar(path), "w", encoding="utf-8") as fh:
        for pid in matrix.ids:
            fh.write(pid + "\n")


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBEDDING_MAGIC:
        raise EmbeddingFormatError("bad magic bytes")
    if len(blob) < 12:
        raise EmbeddingFormatError("truncated header")
    count, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * count * dim
    if len(blob) != expected:
        raise EmbeddingFormatError(f"expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob[12:], dtype="<f4").reshape(count, dim)
    with open(ids_sidecar(path), encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != count:
        raise EmbeddingFormatError("ids sidecar does not match row count")
    return EmbeddingMatrix(ids, values.copy())
