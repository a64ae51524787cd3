"""Checkpoint persistence: one JSON document holding every parameter matrix,
optimizer velocity, EMA shadow, queue entry, prototype, pseudo label, the RNG
state, the epoch counter, and the metric history.

Floats are serialized with repr round-trip precision, so save -> load -> save
is byte-identical and a resumed run reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .contrastive import EmbeddingQueue
from .errors import ParseError, SchemaError
from .nn import EmaPair, Mlp, SgdMomentum
from .prototypes import PrototypeBank, PseudoLabelStore
from .training import EpochMetrics, ModelStack, TrainConfig, TrainState

CKPT_SCHEMA_ID = "ins-mil-ckpt/v1"

_NET_NAMES = ("encoder", "projector", "classifier", "bag_head",
              "encoder_ema", "projector_ema")


def _net_to_doc(net: Mlp) -> dict:
    return {"dims": net.layer_dims,
            "params": [p.tolist() for p in net.params()]}


def _net_from_doc(doc: dict) -> Mlp:
    net = Mlp(doc["dims"])
    net.set_params([np.asarray(p, dtype=np.float64) for p in doc["params"]])
    return net


def save_checkpoint(state: TrainState, path) -> None:
    doc = {
        "schema": CKPT_SCHEMA_ID,
        "epoch": state.epoch,
        "d_raw": state.d_raw,
        "config": asdict(state.cfg),
        "nets": {name: _net_to_doc(getattr(state.models, name))
                 for name in _NET_NAMES},
        "optimizer": {
            "velocities": (None if state.optimizer.velocities is None
                           else [v.tolist() for v in state.optimizer.velocities]),
        },
        "queue": {
            "capacity": state.queue.capacity,
            "dim": state.queue.dim,
            "entries": [
                {"embedding": e.embedding.tolist(), "label": e.label,
                 "true_negative": e.is_true_negative}
                for e in state.queue.entries()
            ],
        },
        "prototypes": {
            "mu": state.bank.mu.tolist(),
            "initialized": list(state.bank.initialized),
            "beta": state.bank.beta,
        },
        "pseudo_labels": {
            "s": state.labels.s.tolist(),
            "frozen": state.labels.frozen.astype(int).tolist(),
            "negative_mask": state.labels.negative_mask.astype(int).tolist(),
            "alpha": state.labels.alpha,
        },
        "rng": state.rng.bit_generator.state,
        "history": [asdict(rec) for rec in state.history],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> TrainState:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"checkpoint is not valid JSON ({exc})") from exc
    if doc.get("schema") != CKPT_SCHEMA_ID:
        raise SchemaError(f"expected checkpoint schema {CKPT_SCHEMA_ID!r}, "
                          f"got {doc.get('schema')!r}")
    cfg = TrainConfig(**doc["config"])
    nets = {name: _net_from_doc(doc["nets"][name]) for name in _NET_NAMES}
    models = ModelStack(**nets)

    optimizer = SgdMomentum(cfg.lr, cfg.sgd_momentum)
    vel = doc["optimizer"]["velocities"]
    if vel is not None:
        optimizer.velocities = [np.asarray(v, dtype=np.float64) for v in vel]

    qdoc = doc["queue"]
    queue = EmbeddingQueue(qdoc["capacity"], qdoc["dim"])
    for entry in qdoc["entries"]:
        if entry["true_negative"]:
            queue.enqueue(np.asarray(entry["embedding"]), 0, from_negative_bag=True)
        else:
            queue.enqueue(np.asarray(entry["embedding"]), entry["label"],
                          from_negative_bag=False)

    pdoc = doc["prototypes"]
    bank = PrototypeBank(cfg.embed_dim, pdoc["beta"])
    bank.mu = np.asarray(pdoc["mu"], dtype=np.float64)
    bank.initialized = [bool(b) for b in pdoc["initialized"]]

    ldoc = doc["pseudo_labels"]
    labels = PseudoLabelStore(np.asarray(ldoc["negative_mask"], dtype=bool),
                              ldoc["alpha"])
    labels.s = np.asarray(ldoc["s"], dtype=np.float64)
    labels.frozen = np.asarray(ldoc["frozen"], dtype=bool)

    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng"]

    ema = EmaPair(online=models.encoder.params() + models.projector.params(),
                  shadow=models.ema_params(), m=cfg.ema_m)
    history = [EpochMetrics(**rec) for rec in doc["history"]]
    return TrainState(cfg=cfg, d_raw=doc["d_raw"], models=models,
                      optimizer=optimizer, ema=ema, queue=queue, bank=bank,
                      labels=labels, rng=rng, epoch=doc["epoch"],
                      history=history)
