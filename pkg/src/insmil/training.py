"""Joint training loop: two augmented views per instance, an online query
branch and an EMA key branch, weakly supervised contrastive learning over an
embedding queue, prototype-driven pseudo labels, and a bag-constraint loss.

Total objective per step::

    L = L_contrastive + lambda1 * L_cls + lambda2 * L_bc

During warm-up epochs the classifier trains on bag-inherited one-hot targets
(every instance inherits its bag's label) while the pseudo-label store stays
at its initial values ([1, 0] frozen for negative-bag instances, [0.5, 0.5]
for positive-bag instances) and prototypes are untouched; the contrastive
term runs throughout by default, with queue labels already following the
true-negative override.  After warm-up the classifier targets switch to the
stored soft labels, which each step drifts toward the nearest prototype
while the prototypes themselves follow the classifier's predictions.

Everything is deterministic given (dataset, config): one RNG drives model
init, epoch shuffling, and augmentation in a fixed draw order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .contrastive import EmbeddingQueue, pooled_contrastive_loss
from .data import FlatInstances, MilDataset, SyntheticConfig, generate_gaussian_mil
from .errors import ConfigurationError, DataError, NumericalError
from .metrics import pseudo_label_quality
from .nn import EmaPair, Mlp, SgdMomentum, normalize_rows, normalize_rows_backward, softmax_xent
from .prototypes import PrototypeBank, PseudoLabelStore

BAG_POOL_SOURCES = ("projection", "encoder")


@dataclass
class TrainConfig:
    epochs: int
    warmup_epochs: int
    batch_size: int = 64
    lr: float = 0.01
    sgd_momentum: float = 0.9
    tau: float = 0.07
    alpha: float = 0.9
    beta: float = 0.99
    ema_m: float = 0.99
    lambda1: float = 1.0
    lambda2: float = 1.0
    queue_capacity: int = 8192
    embed_dim: int = 128
    aug_noise_sigma: float = 0.1
    aug_dropout_p: float = 0.1
    seed: int = 0
    infonce_denominator: bool = False
    # architecture and ablation knobs
    encoder_hidden: int = 256
    classifier_hidden: int = 64
    bag_pool_source: str = "projection"
    iwscl_enabled: bool = True
    iwscl_during_warmup: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigurationError(
                f"warmup_epochs must satisfy 0 <= warmup_epochs < epochs, got "
                f"{self.warmup_epochs} with epochs={self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.sgd_momentum < 1.0):
            raise ConfigurationError(
                f"sgd_momentum must lie in [0, 1), got {self.sgd_momentum}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigurationError(f"beta must lie in [0, 1], got {self.beta}")
        if not (0.0 <= self.ema_m < 1.0):
            raise ConfigurationError(f"ema_m must lie in [0, 1), got {self.ema_m}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be >= 0")
        if self.queue_capacity < 1:
            raise ConfigurationError(
                f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.aug_noise_sigma < 0:
            raise ConfigurationError(
                f"aug_noise_sigma must be >= 0, got {self.aug_noise_sigma}")
        if not (0.0 <= self.aug_dropout_p < 1.0):
            raise ConfigurationError(
                f"aug_dropout_p must lie in [0, 1), got {self.aug_dropout_p}")
        if self.encoder_hidden < 1 or self.classifier_hidden < 1:
            raise ConfigurationError("hidden layer widths must be >= 1")
        if self.bag_pool_source not in BAG_POOL_SOURCES:
            raise ConfigurationError(
                f"bag_pool_source must be one of {BAG_POOL_SOURCES}, "
                f"got {self.bag_pool_source!r}")


@dataclass
class ModelStack:
    encoder: Mlp
    projector: Mlp
    classifier: Mlp
    bag_head: Mlp
    encoder_ema: Mlp
    projector_ema: Mlp

    def trainable_params(self) -> list[np.ndarray]:
        return (self.encoder.params() + self.projector.params()
                + self.classifier.params() + self.bag_head.params())

    def trainable_param_names(self) -> list[str]:
        names = []
        for net_name, net in (("encoder", self.encoder), ("projector", self.projector),
                              ("classifier", self.classifier), ("bag_head", self.bag_head)):
            for l in range(net.n_layers):
                names.append(f"{net_name}.W{l}")
                names.append(f"{net_name}.b{l}")
        return names

    def ema_params(self) -> list[np.ndarray]:
        return self.encoder_ema.params() + self.projector_ema.params()


def build_models(d_raw: int, cfg: TrainConfig, rng: np.random.Generator) -> ModelStack:
    # Draw order is fixed: encoder, projector, classifier, bag head.
    encoder = Mlp([d_raw, cfg.encoder_hidden, cfg.embed_dim], rng)
    projector = Mlp([cfg.embed_dim, cfg.embed_dim, cfg.embed_dim], rng)
    classifier = Mlp([cfg.embed_dim, cfg.classifier_hidden, 2], rng)
    bag_head = Mlp([cfg.embed_dim, 2], rng)
    return ModelStack(encoder=encoder, projector=projector, classifier=classifier,
                      bag_head=bag_head, encoder_ema=encoder.copy(),
                      projector_ema=projector.copy())


@dataclass
class Batch:
    features: np.ndarray  # (b, d_raw)
    bag_labels: np.ndarray  # (b,)
    bag_ids: np.ndarray  # (b,)
    instance_ids: np.ndarray  # (b,) indices into the flattened dataset

    @property
    def from_negative_bag(self) -> np.ndarray:
        return self.bag_labels == 0

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class StepMetrics:
    l_iwscl: float
    l_cls: float
    l_bc: float
    total: float
    iwscl_skips: int
    pplg_skips: int


@dataclass
class EpochMetrics:
    epoch: int
    l_iwscl: float
    l_cls: float
    l_bc: float
    total: float
    l_bc_full: float  # exact whole-bag constraint loss, clean forward
    pseudo_auc: float | None
    iwscl_skips: int
    pplg_skips: int
    ema_hash: str = ""  # not part of the CSV


METRICS_CSV_COLUMNS = ("epoch", "l_iwscl", "l_cls", "l_bc", "total",
                       "l_bc_full", "pseudo_auc", "iwscl_skips", "pplg_skips")


def write_metrics_csv(history: list[EpochMetrics], path, append: bool = False) -> None:
    """Append-friendly CSV with full-precision floats (repr round-trip)."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        if not append:
            fh.write(",".join(METRICS_CSV_COLUMNS) + "\n")
        for rec in history:
            cells = [str(rec.epoch), repr(rec.l_iwscl), repr(rec.l_cls),
                     repr(rec.l_bc), repr(rec.total), repr(rec.l_bc_full),
                     "" if rec.pseudo_auc is None else repr(rec.pseudo_auc),
                     str(rec.iwscl_skips), str(rec.pplg_skips)]
            fh.write(",".join(cells) + "\n")


@dataclass
class TrainState:
    cfg: TrainConfig
    d_raw: int
    models: ModelStack
    optimizer: SgdMomentum
    ema: EmaPair
    queue: EmbeddingQueue
    bank: PrototypeBank
    labels: PseudoLabelStore
    rng: np.random.Generator
    epoch: int = 0
    history: list[EpochMetrics] = field(default_factory=list)


def init_state(d_raw: int, negative_mask: np.ndarray, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    models = build_models(d_raw, cfg, rng)
    ema = EmaPair(
        online=models.encoder.params() + models.projector.params(),
        shadow=models.ema_params(),
        m=cfg.ema_m)
    return TrainState(
        cfg=cfg, d_raw=d_raw, models=models,
        optimizer=SgdMomentum(cfg.lr, cfg.sgd_momentum), ema=ema,
        queue=EmbeddingQueue(cfg.queue_capacity, cfg.embed_dim),
        bank=PrototypeBank(cfg.embed_dim, cfg.beta),
        labels=PseudoLabelStore(negative_mask, cfg.alpha),
        rng=rng)


def augment_batch(x: np.ndarray, rng: np.random.Generator, noise_sigma: float,
                  dropout_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views per row: additive Gaussian noise followed by
    coordinate dropout.  Draw order (query noise, query dropout, key noise,
    key dropout) is fixed and independent of sigma/p for determinism."""
    vq = x + rng.standard_normal(x.shape) * noise_sigma
    vq = vq * (rng.random(x.shape) >= dropout_p)
    vk = x + rng.standard_normal(x.shape) * noise_sigma
    vk = vk * (rng.random(x.shape) >= dropout_p)
    return vq, vk


def augment_views(x: np.ndarray, rng: np.random.Generator, noise_sigma: float,
                  dropout_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Query/key views of a single feature vector."""
    vq, vk = augment_batch(np.asarray(x, dtype=np.float64)[None, :], rng,
                           noise_sigma, dropout_p)
    return vq[0], vk[0]


@dataclass
class QueryForward:
    h: np.ndarray  # encoder output
    cache_enc: object
    logits: np.ndarray  # classifier logits
    cache_cls: object
    u: np.ndarray  # raw projector output
    cache_proj: object
    q: np.ndarray  # unit-norm projection
    norms: np.ndarray


def forward_query(models: ModelStack, views: np.ndarray) -> QueryForward:
    h, cache_enc = models.encoder.forward(views)
    logits, cache_cls = models.classifier.forward(h)
    u, cache_proj = models.projector.forward(h)
    q, norms = normalize_rows(u)
    return QueryForward(h=h, cache_enc=cache_enc, logits=logits,
                        cache_cls=cache_cls, u=u, cache_proj=cache_proj,
                        q=q, norms=norms)


def forward_key(models: ModelStack, views: np.ndarray) -> np.ndarray:
    hk, _ = models.encoder_ema.forward(views)
    uk, _ = models.projector_ema.forward(hk)
    k, _ = normalize_rows(uk)
    return k


def bag_constraint_loss(embeddings: np.ndarray, bag_ids: np.ndarray,
                        bag_labels: np.ndarray, bag_head: Mlp,
                        ) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Mean-pool the in-batch embeddings of each bag, classify the pooled
    vector against the bag label, and average the cross-entropy over the bags
    represented in the batch.

    Returns (loss, grad_embeddings, bag_head_grads) for the unweighted loss.
    """
    uniq, inverse = np.unique(bag_ids, return_inverse=True)
    n_bags = uniq.shape[0]
    counts = np.zeros(n_bags)
    np.add.at(counts, inverse, 1.0)
    sums = np.zeros((n_bags, embeddings.shape[1]))
    np.add.at(sums, inverse, embeddings)
    means = sums / counts[:, None]
    labels_uniq = np.zeros(n_bags, dtype=np.int64)
    labels_uniq[inverse] = bag_labels
    targets = np.zeros((n_bags, 2))
    targets[np.arange(n_bags), labels_uniq] = 1.0
    logits, cache = bag_head.forward(means)
    loss, grad_logits = softmax_xent(logits, targets)
    head_grads, grad_means = bag_head.backward(cache, grad_logits)
    grad_embeddings = grad_means[inverse] / counts[inverse][:, None]
    return loss, grad_embeddings, head_grads


@dataclass
class LossParts:
    l_iwscl: float
    l_cls: float
    l_bc: float
    total: float
    iwscl_skips: int


def losses_from_forward(models: ModelStack, cfg: TrainConfig, qf: QueryForward,
                        keys: np.ndarray, s_targets: np.ndarray,
                        bag_ids: np.ndarray, bag_labels: np.ndarray,
                        eff_labels: np.ndarray,
                        queue_emb: np.ndarray, queue_labels: np.ndarray,
                        iwscl_active: bool,
                        pool_override: tuple | None = None,
                        ) -> tuple[LossParts, list[np.ndarray], int]:
    """All loss components plus analytic gradients for the trainable params.

    Contrastive pool members (batch queries, keys, queue entries) are
    constants: gradients flow only through each anchor's own query embedding.
    ``pool_override = (pool_emb, pool_labels, own_column)`` substitutes a
    frozen pool, which the gradient checker uses so the loss stays a smooth
    function of the parameters alone.
    """
    n = qf.q.shape[0]
    if iwscl_active:
        if pool_override is not None:
            pool_emb_o, pool_labels_o, own_col = pool_override
            segments = [(pool_emb_o, pool_labels_o)]
        else:
            segments = [(qf.q, eff_labels), (keys, eff_labels),
                        (queue_emb, queue_labels)]
            own_col = np.arange(n)
        l_iwscl, grad_q_con, iwscl_skips, _ = pooled_contrastive_loss(
            qf.q, segments, eff_labels, own_col, cfg.tau,
            cfg.infonce_denominator)
    else:
        l_iwscl, grad_q_con, iwscl_skips = 0.0, np.zeros_like(qf.q), 0

    l_cls, grad_logits = softmax_xent(qf.logits, s_targets)

    bag_source = qf.q if cfg.bag_pool_source == "projection" else qf.h
    l_bc, grad_bag_emb, bag_head_grads = bag_constraint_loss(
        bag_source, bag_ids, bag_labels, models.bag_head)

    total = l_iwscl + cfg.lambda1 * l_cls + cfg.lambda2 * l_bc

    # Backward through the query branch.
    grad_q = grad_q_con.copy()
    if cfg.bag_pool_source == "projection":
        grad_q += cfg.lambda2 * grad_bag_emb
    grad_u = normalize_rows_backward(grad_q, qf.q, qf.norms)
    proj_grads, grad_h_proj = models.projector.backward(qf.cache_proj, grad_u)
    cls_grads, grad_h_cls = models.classifier.backward(
        qf.cache_cls, cfg.lambda1 * grad_logits)
    grad_h = grad_h_proj + grad_h_cls
    if cfg.bag_pool_source == "encoder":
        grad_h = grad_h + cfg.lambda2 * grad_bag_emb
    enc_grads, _ = models.encoder.backward(qf.cache_enc, grad_h)
    head_grads_scaled = [cfg.lambda2 * g for g in bag_head_grads]

    grads = enc_grads + proj_grads + cls_grads + head_grads_scaled
    parts = LossParts(l_iwscl=l_iwscl, l_cls=l_cls, l_bc=l_bc, total=total,
                      iwscl_skips=iwscl_skips)
    return parts, grads, iwscl_skips


def train_step(state: TrainState, batch: Batch) -> StepMetrics:
    """One optimization step over a shuffled instance batch.

    Order of operations: augment both views; query/key forward; contrastive
    loss over the batch anchors against the previous-iteration queue; pseudo
    labels drifted with the previous-iteration prototypes, then prototype
    updates (post-warm-up only); classification loss against the current soft
    labels (bag-inherited one-hots during warm-up); bag-constraint loss over
    in-batch bag members; one optimizer step on the query branch and bag
    head; EMA update; enqueue all keys.
    """
    cfg = state.cfg
    models = state.models
    warmup = state.epoch < cfg.warmup_epochs
    n = len(batch)

    views_q, views_k = augment_batch(batch.features, state.rng,
                                     cfg.aug_noise_sigma, cfg.aug_dropout_p)
    qf = forward_query(models, views_q)
    keys = forward_key(models, views_k)
    y_hat = np.argmax(qf.logits, axis=1)
    from_neg = batch.from_negative_bag
    eff_labels = np.where(from_neg, 0, y_hat).astype(np.int64)

    pplg_skips = 0
    if not warmup:
        for i in range(n):
            if not from_neg[i]:
                if not state.labels.generate(int(batch.instance_ids[i]), qf.q[i],
                                             state.bank):
                    pplg_skips += 1
        for i in range(n):
            state.bank.update(qf.q[i], int(y_hat[i]), bool(from_neg[i]))

    # During warm-up the store still holds its bag-inherited initial values,
    # so these targets are the classic label-inheritance baseline until the
    # prototype machinery starts moving them.
    s_targets = state.labels.s[batch.instance_ids]
    iwscl_active = cfg.iwscl_enabled and (cfg.iwscl_during_warmup or not warmup)
    queue_emb, queue_labels, _ = state.queue.raw_views()
    parts, grads, iwscl_skips = losses_from_forward(
        models, cfg, qf, keys, s_targets, batch.bag_ids, batch.bag_labels,
        eff_labels, queue_emb, queue_labels, iwscl_active)

    if not math.isfinite(parts.total):
        raise NumericalError(
            f"non-finite total loss at epoch {state.epoch}: "
            f"iwscl={parts.l_iwscl} cls={parts.l_cls} bc={parts.l_bc}; "
            f"batch instance ids {batch.instance_ids.tolist()}")

    state.optimizer.step(models.trainable_params(), grads)
    state.ema.update()
    for i in range(n):
        state.queue.enqueue(keys[i], int(y_hat[i]), bool(from_neg[i]))

    return StepMetrics(l_iwscl=parts.l_iwscl, l_cls=parts.l_cls, l_bc=parts.l_bc,
                       total=parts.total, iwscl_skips=iwscl_skips,
                       pplg_skips=pplg_skips)


def exact_bag_loss(state: TrainState, flat: FlatInstances) -> float:
    """Whole-bag constraint loss over the full dataset with a clean forward
    (no augmentation); reported per epoch alongside the in-batch estimate."""
    models = state.models
    h, _ = models.encoder.forward(flat.features)
    if state.cfg.bag_pool_source == "projection":
        u, _ = models.projector.forward(h)
        emb, _ = normalize_rows(u)
    else:
        emb = h
    loss, _, _ = bag_constraint_loss(emb, flat.bag_ids, flat.bag_labels,
                                     models.bag_head)
    return loss


def _ema_hash(models: ModelStack) -> str:
    digest = hashlib.sha256()
    for arr in models.ema_params():
        digest.update(arr.tobytes())
    return digest.hexdigest()[:16]


def train_loop(state: TrainState, flat: FlatInstances,
               truth: np.ndarray | None = None) -> list[EpochMetrics]:
    """Run epochs state.epoch .. cfg.epochs-1; returns the new history rows.

    ``truth`` is an evaluation side channel: it only feeds the per-epoch
    pseudo-label AUC column and never influences training or RNG draws.
    """
    cfg = state.cfg
    n = flat.n
    if state.labels.n != n:
        raise DataError(
            f"pseudo-label store covers {state.labels.n} instances but the "
            f"dataset has {n}; resume requires the original dataset")
    new_rows: list[EpochMetrics] = []
    while state.epoch < cfg.epochs:
        perm = state.rng.permutation(n)
        sums = np.zeros(4)
        iwscl_skips = 0
        pplg_skips = 0
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = Batch(features=flat.features[idx],
                          bag_labels=flat.bag_labels[idx],
                          bag_ids=flat.bag_ids[idx],
                          instance_ids=idx)
            sm = train_step(state, batch)
            sums += (sm.l_iwscl, sm.l_cls, sm.l_bc, sm.total)
            iwscl_skips += sm.iwscl_skips
            pplg_skips += sm.pplg_skips
            n_steps += 1
        means = sums / n_steps
        pseudo_auc = None
        if truth is not None:
            pseudo_auc = pseudo_label_quality(state.labels, truth)
        rec = EpochMetrics(
            epoch=state.epoch, l_iwscl=float(means[0]), l_cls=float(means[1]),
            l_bc=float(means[2]), total=float(means[3]),
            l_bc_full=exact_bag_loss(state, flat), pseudo_auc=pseudo_auc,
            iwscl_skips=iwscl_skips, pplg_skips=pplg_skips,
            ema_hash=_ema_hash(state.models))
        state.history.append(rec)
        new_rows.append(rec)
        state.epoch += 1
    return new_rows


def fit(ds: MilDataset, cfg: TrainConfig) -> tuple[TrainState, list[EpochMetrics]]:
    """Train from scratch on a dataset.

    Instance truth labels, when present, are used only to report pseudo-label
    AUC; training reads bag labels alone, so a truth-stripped copy of the
    same dataset yields bit-identical parameters.
    """
    cfg.validate()
    flat = ds.flatten()
    state = init_state(flat.features.shape[1], flat.bag_labels == 0, cfg)
    history = train_loop(state, flat, truth=flat.truth)
    return state, history


# ---------------------------------------------------------------------------
# Gradient-check fixture: a frozen micro training step.
# ---------------------------------------------------------------------------

def build_gradcheck_problem(seed: int = 0, d_raw: int = 4, embed_dim: int = 8,
                            corrupt: bool = False):
    """Total training loss on a frozen micro-batch (2 bags x 2 instances).

    Freezes everything the loss may not differentiate through: augmented
    views, key embeddings, the queue, the contrastive pool (including the
    batch's own query embeddings as members), effective labels, and the soft
    targets.  Returns (loss_and_grad_fn, params, param_names) suitable for
    nn.gradcheck; ``corrupt`` injects a +0.1 error into the first analytic
    gradient block as a negative control.
    """
    data_cfg = SyntheticConfig(n_pos_bags=1, n_neg_bags=1, instances_per_bag=2,
                               positive_ratio=0.5, d_raw=d_raw,
                               class_separation=2.0, noise_sigma=1.0, seed=seed)
    flat = generate_gaussian_mil(data_cfg).flatten()
    cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, seed=seed,
                      embed_dim=embed_dim, encoder_hidden=2 * embed_dim,
                      classifier_hidden=embed_dim, queue_capacity=16)
    state = init_state(d_raw, flat.bag_labels == 0, cfg)
    models = state.models

    qrng = np.random.default_rng(seed + 1)
    for label in (0, 1, 0, 1):
        v = qrng.standard_normal(embed_dim)
        v /= np.linalg.norm(v)
        state.queue.enqueue(v, label, from_negative_bag=(label == 0))

    # Generic soft targets: negative-bag rows stay frozen at [1, 0].
    s_targets = state.labels.s.copy()
    pos_rows = np.where(~state.labels.negative_mask)[0]
    drift = np.array([[0.7, 0.3], [0.2, 0.8]])
    for row, value in zip(pos_rows, drift):
        s_targets[row] = value

    views_q, views_k = augment_batch(flat.features, np.random.default_rng(seed + 2),
                                     cfg.aug_noise_sigma, cfg.aug_dropout_p)
    base = forward_query(models, views_q)
    keys = forward_key(models, views_k)
    y_hat = np.argmax(base.logits, axis=1)
    eff = np.where(flat.bag_labels == 0, 0, y_hat).astype(np.int64)
    queue_emb, queue_labels, _ = state.queue.snapshot()
    pool_emb = np.vstack([base.q, keys, queue_emb])
    pool_labels = np.concatenate([eff, eff, queue_labels])
    own_col = np.arange(flat.n)
    pool = (pool_emb.copy(), pool_labels.copy(), own_col)

    bag_ids = flat.bag_ids.copy()
    bag_labels = flat.bag_labels.copy()

    def loss_and_grad(_params):
        qf = forward_query(models, views_q)
        parts, grads, _ = losses_from_forward(
            models, cfg, qf, keys, s_targets, bag_ids, bag_labels, eff,
            queue_emb, queue_labels, iwscl_active=True, pool_override=pool)
        if corrupt:
            grads = [g.copy() for g in grads]
            grads[0] = grads[0] + 0.1
        return parts.total, grads

    return loss_and_grad, models.trainable_params(), models.trainable_param_names()
