"""Multi-modal fusion classifier over all labeled categories.

Architecture: each of the seven catalog text fields is a hashed n-gram vector
passed through its own learned linear projection (64 dims per field); the image
vector gets its own projection. The eight blocks concatenate to a 512-dim
vector that feeds two fully-connected ReLU layers; a linear head with per-class
biases produces class scores, normalized by a stable softmax. The second
fused layer's activations are the product embedding, so the embedding width is
adjustable independently of the rest of the network.

Text projections are stored compactly over the hash buckets active in the
training data; buckets never seen in training contribute nothing, and their
gradients are exactly the rows touched by a batch.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import TEXT_FIELDS, EmbeddingMatrix, Product
from .featurize import DEFAULT_HASH_DIM, field_vectors, image_vector
from .optim import Adam

FIELD_PROJ_DIM = 64
FUSED_INPUT_DIM = FIELD_PROJ_DIM * (len(TEXT_FIELDS) + 1)  # 7 text blocks + image block
CHECKPOINT_MAGIC = b"PNM1"
CHECKPOINT_VERSION = 1


class MasterTrainingError(ValueError):
    """Gold snapshot cannot support training (too few classes or examples)."""


class CheckpointFormatError(ValueError):
    """Checkpoint file does not match the expected layout."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    embed_dim: int = 256
    train_fraction: float = 0.8
    hash_dim: int = DEFAULT_HASH_DIM

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class FusionNet:
    """All trainable parameters plus the class list and text vocabularies."""

    hash_dim: int
    d_img: int
    embed_dim: int
    classes: list[str]
    vocab: list[np.ndarray]  # per text field: sorted active bucket ids (int64)
    P: list[np.ndarray]  # per text field: (n_active, FIELD_PROJ_DIM)
    P_img: np.ndarray  # (d_img, FIELD_PROJ_DIM)
    W1: np.ndarray  # (FUSED_INPUT_DIM, embed_dim)
    b1: np.ndarray
    W2: np.ndarray  # (embed_dim, embed_dim)
    b2: np.ndarray
    V: np.ndarray  # (embed_dim, n_classes)
    b_out: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def params(self) -> list[np.ndarray]:
        return [*self.P, self.P_img, self.W1, self.b1, self.W2, self.b2, self.V, self.b_out]


def init_fusion_net(classes, vocab, d_img, embed_dim, hash_dim, seed) -> FusionNet:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) init per matrix, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    P = [glorot(hash_dim, FIELD_PROJ_DIM, (len(v), FIELD_PROJ_DIM)) for v in vocab]
    return FusionNet(
        hash_dim=hash_dim,
        d_img=d_img,
        embed_dim=embed_dim,
        classes=list(classes),
        vocab=[np.asarray(v, dtype=np.int64) for v in vocab],
        P=P,
        P_img=glorot(max(d_img, 1), FIELD_PROJ_DIM, (d_img, FIELD_PROJ_DIM)),
        W1=glorot(FUSED_INPUT_DIM, embed_dim, (FUSED_INPUT_DIM, embed_dim)),
        b1=np.zeros(embed_dim),
        W2=glorot(embed_dim, embed_dim, (embed_dim, embed_dim)),
        b2=np.zeros(embed_dim),
        V=glorot(embed_dim, len(classes), (embed_dim, len(classes))),
        b_out=np.zeros(len(classes)),
    )


def build_vocab(products, hash_dim) -> list[np.ndarray]:
    """Per-field sorted union of hash buckets active across the given products."""
    seen = [set() for _ in TEXT_FIELDS]
    for product in products:
        for f, hv in enumerate(field_vectors(product, hash_dim)):
            seen[f].update(hv.indices.tolist())
    return [np.array(sorted(s), dtype=np.int64) for s in seen]


@dataclass
class EncodedProducts:
    """Products pre-featurized against a net's vocabulary for batched math."""

    ids: list[str]
    fields: list[sp.csr_matrix]  # 7 matrices (n, n_active_f), compact columns
    images: np.ndarray  # (n, d_img)


def _compact_columns(hv, vocab):
    """Map hashed bucket ids to compact vocab positions, dropping unseen buckets."""
    if not len(vocab) or not hv.nnz:
        return np.empty(0, dtype=np.int64), np.empty(0)
    pos = np.searchsorted(vocab, hv.indices)
    pos_clipped = np.minimum(pos, len(vocab) - 1)
    ok = vocab[pos_clipped] == hv.indices
    return pos[ok], hv.weights[ok]


def encode_products(products, images, net: FusionNet) -> EncodedProducts:
    products = list(products)
    n = len(products)
    per_field_cols: list[list[np.ndarray]] = [[] for _ in TEXT_FIELDS]
    per_field_data: list[list[np.ndarray]] = [[] for _ in TEXT_FIELDS]
    per_field_indptr = [np.zeros(n + 1, dtype=np.int64) for _ in TEXT_FIELDS]
    imgs = np.zeros((n, net.d_img))
    for i, product in enumerate(products):
        for f, hv in enumerate(field_vectors(product, net.hash_dim)):
            cols, data = _compact_columns(hv, net.vocab[f])
            per_field_cols[f].append(cols)
            per_field_data[f].append(data)
            per_field_indptr[f][i + 1] = per_field_indptr[f][i] + len(cols)
        imgs[i] = image_vector(product, images, net.d_img)
    mats = []
    for f in range(len(TEXT_FIELDS)):
        mats.append(
            sp.csr_matrix(
                (
                    np.concatenate(per_field_data[f]) if n else np.empty(0),
                    np.concatenate(per_field_cols[f]) if n else np.empty(0, dtype=np.int64),
                    per_field_indptr[f],
                ),
                shape=(n, len(net.vocab[f])),
            )
        )
    return EncodedProducts(ids=[p.id for p in products], fields=mats, images=imgs)


def forward_batch(net: FusionNet, enc: EncodedProducts, idx=None):
    """Logits and hidden embedding for a batch; returns intermediates for backprop."""
    if idx is None:
        idx = np.arange(len(enc.ids))
    blocks = [enc.fields[f][idx] @ net.P[f] for f in range(len(TEXT_FIELDS))]
    blocks.append(enc.images[idx] @ net.P_img)
    h0 = np.concatenate(blocks, axis=1)
    z1 = h0 @ net.W1 + net.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ net.W2 + net.b2
    h2 = np.maximum(z2, 0.0)
    logits = h2 @ net.V + net.b_out
    return logits, h2, (idx, h0, z1, h1, z2)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; safe for logits of magnitude 1e3+."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(net: FusionNet, enc: EncodedProducts, idx=None) -> np.ndarray:
    logits, _, _ = forward_batch(net, enc, idx)
    return softmax(logits)


def loss_and_grad(net: FusionNet, enc: EncodedProducts, labels: np.ndarray, idx=None):
    """Mean cross-entropy over the batch and the gradient for every parameter.

    Text-projection gradients are dense over the compact active-bucket rows,
    which is exactly the set of buckets a batch can touch.
    """
    if idx is None:
        idx = np.arange(len(enc.ids))
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("batch must be nonempty")
    if labels.min() < 0 or labels.max() >= net.n_classes:
        raise ValueError("label out of range")
    logits, h2, (idx, h0, z1, h1, z2) = forward_batch(net, enc, idx)
    b = len(labels)
    p = softmax(logits)
    # clip only for the reported loss; the gradient uses p directly
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(b), labels], 1e-300))))
    dlogits = p.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b

    gV = h2.T @ dlogits
    gb_out = dlogits.sum(axis=0)
    dh2 = dlogits @ net.V.T
    dz2 = dh2 * (z2 > 0)
    gW2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ net.W2.T
    dz1 = dh1 * (z1 > 0)
    gW1 = h0.T @ dz1
    gb1 = dz1.sum(axis=0)
    dh0 = dz1 @ net.W1.T

    gP = []
    for f in range(len(TEXT_FIELDS)):
        block = dh0[:, f * FIELD_PROJ_DIM : (f + 1) * FIELD_PROJ_DIM]
        gP.append(np.asarray(enc.fields[f][idx].T @ block))
    img_block = dh0[:, len(TEXT_FIELDS) * FIELD_PROJ_DIM :]
    gP_img = enc.images[idx].T @ img_block
    grads = [*gP, gP_img, gW1, gb1, gW2, gb2, gV, gb_out]
    return loss, grads


# ---------------------------------------------------------------------------
# Training


def split_gold(gold_positives: dict[str, list[str]], seed: int, train_fraction: float):
    """Seeded per-leaf train/test split of positive product ids.

    Returns (classes, train_pairs, test_pairs) where pairs are (product_id,
    class_index). Every leaf keeps at least one training example; leaves with a
    single example contribute no test item.
    """
    classes = sorted(leaf for leaf, pids in gold_positives.items() if len(pids) >= 1)
    train, test = [], []
    for ci, leaf in enumerate(classes):
        pids = sorted(set(gold_positives[leaf]))
        rng = np.random.default_rng([seed, ci])
        perm = rng.permutation(len(pids))
        if len(pids) == 1:
            n_train = 1
        else:
            n_train = min(len(pids) - 1, max(1, int(round(train_fraction * len(pids)))))
        for j in perm[:n_train]:
            train.append((pids[j], ci))
        for j in perm[n_train:]:
            test.append((pids[j], ci))
    return classes, train, test


def _top1_accuracy(net, enc, labels):
    if len(labels) == 0:
        return None
    p = predict_batch(net, enc)
    return float(np.mean(p.argmax(axis=1) == labels))


def train_master(pool, images, gold_positives, config: TrainConfig, on_epoch=None):
    """Train the fusion classifier on per-leaf positive ids.

    gold_positives maps leaf id -> positive product ids; negatives never enter
    here (they only steer the per-leaf local models). Returns (net, log) where
    log has one entry per epoch: train loss and held-out top-1.
    """
    eligible = [leaf for leaf, pids in gold_positives.items() if len(set(pids)) >= 2]
    if len(eligible) < 2:
        raise MasterTrainingError(
            f"need >=2 leaves with >=2 positives each, found {len(eligible)}"
        )
    classes, train_pairs, test_pairs = split_gold(
        gold_positives, config.seed, config.train_fraction
    )
    d_img = images.dim if images is not None else 0

    def encode_pairs(pairs, net):
        pids = sorted({pid for pid, _ in pairs})
        enc = encode_products([pool[pid] for pid in pids], images, net)
        row = {pid: i for i, pid in enumerate(pids)}
        order = np.array([row[pid] for pid, _ in pairs], dtype=np.intp)
        sliced = EncodedProducts(
            ids=[pid for pid, _ in pairs],
            fields=[m[order] for m in enc.fields],
            images=enc.images[order],
        )
        return sliced, np.array([ci for _, ci in pairs], dtype=np.int64)

    vocab = build_vocab((pool[pid] for pid, _ in train_pairs), config.hash_dim)
    net = init_fusion_net(classes, vocab, d_img, config.embed_dim, config.hash_dim, config.seed)
    train_enc, train_y = encode_pairs(train_pairs, net)
    test_enc, test_y = encode_pairs(test_pairs, net) if test_pairs else (None, None)

    opt = Adam(net.params(), lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    order_rng = np.random.default_rng([config.seed, len(classes), 1])
    n = len(train_pairs)
    log = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            loss, grads = loss_and_grad(net, train_enc, train_y[batch], idx=batch)
            opt.step(grads)
            total += loss * len(batch)
        entry = {
            "epoch": epoch,
            "train_loss": total / n,
            "test_top1": _top1_accuracy(net, test_enc, test_y) if test_enc else None,
        }
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return net, log


# ---------------------------------------------------------------------------
# Single-product inference


def forward(net: FusionNet, product: Product, images=None):
    enc = encode_products([product], images, net)
    logits, h2, _ = forward_batch(net, enc)
    return logits[0], h2[0]


def predict(net: FusionNet, product: Product, images=None) -> np.ndarray:
    logits, _ = forward(net, product, images)
    return softmax(logits)


def predict_topk(net: FusionNet, product: Product, k: int, images=None):
    """Top-k (leaf id, probability), descending; ties break by ascending class index."""
    if not 1 <= k <= net.n_classes:
        raise ValueError(f"k must be in [1, {net.n_classes}]")
    p = predict(net, product, images)
    order = sorted(range(net.n_classes), key=lambda c: (-p[c], c))
    return [(net.classes[c], float(p[c])) for c in order[:k]]


def embed(net: FusionNet, product: Product, images=None) -> np.ndarray:
    """Last-hidden-layer product embedding, length embed_dim."""
    _, h2 = forward(net, product, images)
    return h2


def embed_pool(net: FusionNet, pool, images=None, chunk=1024) -> EmbeddingMatrix:
    products = list(pool)
    rows = np.zeros((len(products), net.embed_dim), dtype=np.float32)
    for start in range(0, len(products), chunk):
        part = products[start : start + chunk]
        enc = encode_products(part, images, net)
        _, h2, _ = forward_batch(net, enc)
        rows[start : start + len(part)] = h2.astype(np.float32)
    return EmbeddingMatrix([p.id for p in products], rows)


# ---------------------------------------------------------------------------
# Checkpoints


def classes_sidecar(path) -> str:
    return os.fspath(path) + ".classes"


def save_checkpoint(net: FusionNet, path):
    """Binary layout: magic, version byte, shape table, then f32 parameter blocks."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += bytes([CHECKPOINT_VERSION])
    out += struct.pack(
        "<IIIII", net.hash_dim, net.d_img, net.embed_dim, net.n_classes, len(TEXT_FIELDS)
    )
    for v in net.vocab:
        out += struct.pack("<I", len(v))
        out += v.astype("<u4").tobytes()
    for p in net.params():
        out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(out)
    with open(classes_sidecar(path), "w", encoding="utf-8") as fh:
        for leaf in net.classes:
            fh.write(leaf + "\n")


def load_checkpoint(path) -> FusionNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if blob[4] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {blob[4]}")
    off = 5
    hash_dim, d_img, embed_dim, n_classes, n_fields = struct.unpack_from("<IIIII", blob, off)
    off += 20
    if n_fields != len(TEXT_FIELDS):
        raise CheckpointFormatError(f"expected {len(TEXT_FIELDS)} text fields, found {n_fields}")
    vocab = []
    for _ in range(n_fields):
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        vocab.append(np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64))
        off += 4 * count

    def block(shape):
        nonlocal off
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).astype(np.float64)
        off += 4 * size
        return arr.reshape(shape)

    try:
        P = [block((len(v), FIELD_PROJ_DIM)) for v in vocab]
        P_img = block((d_img, FIELD_PROJ_DIM))
        W1 = block((FUSED_INPUT_DIM, embed_dim))
        b1 = block((embed_dim,))
        W2 = block((embed_dim, embed_dim))
        b2 = block((embed_dim,))
        V = block((embed_dim, n_classes))
        b_out = block((n_classes,))
    except ValueError as exc:
        raise CheckpointFormatError(f"truncated parameter block: {exc}") from exc
    if off != len(blob):
        raise CheckpointFormatError("trailing bytes after parameter blocks")
    with open(classes_sidecar(path), encoding="utf-8") as fh:
        classes = [line.rstrip("\n") for line in fh if line.strip()]
    if len(classes) != n_classes:
        raise CheckpointFormatError("class sidecar does not match class count")
    return FusionNet(
        hash_dim=int(hash_dim),
        d_img=int(d_img),
        embed_dim=int(embed_dim),
        classes=classes,
        vocab=vocab,
        P=P,
        P_img=P_img,
        W1=W1,
        b1=b1,
        W2=W2,
        b2=b2,
        V=V,
        b_out=b_out,
    )


# ---------------------------------------------------------------------------
# Estimator wrapper


class FusionClassifier(BaseEstimator, TransformerMixin):
    """Estimator facade: fit on (products, leaf ids), predict probabilities,
    transform products into embeddings."""

    def __init__(
        self,
        embed_dim=256,
        epochs=50,
        batch_size=32,
        lr=1e-3,
        seed=0,
        hash_dim=DEFAULT_HASH_DIM,
        train_fraction=0.8,
    ):
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.hash_dim = hash_dim
        self.train_fraction = train_fraction

    def _config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            embed_dim=self.embed_dim,
            train_fraction=self.train_fraction,
            hash_dim=self.hash_dim,
        )

    def fit(self, X, y, images=None):
        from .corpus import Pool

        products = list(X)
        if len(products) != len(y):
            raise ValueError("X and y must have equal length")
        gold: dict[str, list[str]] = {}
        for product, leaf in zip(products, y):
            gold.setdefault(leaf, []).append(product.id)
        pool = Pool(products)
        self.images_ = images
        self.net_, self.log_ = train_master(pool, images, gold, self._config())
        self.classes_ = np.array(self.net_.classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        enc = encode_products(list(X), self.images_, self.net_)
        return predict_batch(self.net_, enc)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        enc = encode_products(list(X), self.images_, self.net_)
        _, h2, _ = forward_batch(self.net_, enc)
        return h2
