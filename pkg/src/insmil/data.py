"""Bag/instance data model, synthetic generators, and JSON-Lines persistence.

A dataset is a list of bags; each bag holds fixed-width feature-vector
instances and a binary label.  A bag is negative exactly when every instance
in it is negative, so every generated positive bag contains at least one
positive instance and negative bags contain none.  Ground-truth instance
labels travel with the data for evaluation only and can be stripped on load
so that training code never sees them.

File format (one JSON document per line)::

    {"schema": "ins-mil/v1", "d_raw": <int>, "metadata": {...}}
    {"bag_id": 0, "label": 1, "instances": [[f, ...], ...], "truth": [0, 1, ...]}
    {"bag_id": 1, "label": 0, "instances": [[f, ...], ...], "truth": null}

Floats are serialized with full round-trip precision, so save followed by
load is the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ParseError, SchemaError

SCHEMA_ID = "ins-mil/v1"


def round_half_up(x: float) -> int:
    """Round to the nearest integer with halves away from zero (2.5 -> 3)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Instance:
    features: np.ndarray  # (d_raw,) float64
    truth_label: int | None  # evaluation side channel, never read by training
    bag_index: int  # position of the owning bag within the dataset
    index_in_bag: int


@dataclass
class Bag:
    bag_id: int
    label: int
    instances: list[Instance]


@dataclass
class FlatInstances:
    """Column view of a dataset, in bag order then instance order."""

    features: np.ndarray  # (n, d_raw)
    bag_ids: np.ndarray  # (n,) bag_id of the owning bag
    bag_labels: np.ndarray  # (n,) label of the owning bag
    truth: np.ndarray | None  # (n,) or None when any instance lacks truth

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def from_negative_bag(self) -> np.ndarray:
        return self.bag_labels == 0


@dataclass
class MilDataset:
    bags: list[Bag]
    d_raw: int
    has_instance_truth: bool
    metadata: dict[str, str] = field(default_factory=dict)

    def n_instances(self) -> int:
        return sum(len(b.instances) for b in self.bags)

    def flatten(self) -> FlatInstances:
        feats, bids, blabs, truth = [], [], [], []
        all_truth = True
        for bag in self.bags:
            for inst in bag.instances:
                feats.append(inst.features)
                bids.append(bag.bag_id)
                blabs.append(bag.label)
                if inst.truth_label is None:
                    all_truth = False
                else:
                    truth.append(inst.truth_label)
        return FlatInstances(
            features=np.asarray(feats, dtype=np.float64),
            bag_ids=np.asarray(bids, dtype=np.int64),
            bag_labels=np.asarray(blabs, dtype=np.int64),
            truth=np.asarray(truth, dtype=np.int64) if all_truth else None,
        )

    def strip_truth(self) -> "MilDataset":
        """Copy of the dataset with every instance truth label removed."""
        bags = [
            Bag(
                bag_id=b.bag_id,
                label=b.label,
                instances=[replace(i, truth_label=None) for i in b.instances],
            )
            for b in self.bags
        ]
        return MilDataset(bags=bags, d_raw=self.d_raw, has_instance_truth=False,
                          metadata=dict(self.metadata))


@dataclass(frozen=True)
class SyntheticConfig:
    n_pos_bags: int
    n_neg_bags: int
    instances_per_bag: int
    positive_ratio: float
    d_raw: int
    class_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def positives_per_bag(self) -> int:
        return round_half_up(self.positive_ratio * self.instances_per_bag)

    def validate(self) -> None:
        if self.n_pos_bags < 0:
            raise ConfigurationError(f"n_pos_bags must be >= 0, got {self.n_pos_bags}")
        if self.n_neg_bags < 0:
            raise ConfigurationError(f"n_neg_bags must be >= 0, got {self.n_neg_bags}")
        if self.n_pos_bags + self.n_neg_bags == 0:
            raise ConfigurationError("n_pos_bags + n_neg_bags must be >= 1 (zero bags requested)")
        if self.instances_per_bag < 1:
            raise ConfigurationError(
                f"instances_per_bag must be >= 1, got {self.instances_per_bag}")
        if self.d_raw < 1:
            raise ConfigurationError(f"d_raw must be >= 1, got {self.d_raw}")
        if not (0.0 < self.positive_ratio <= 1.0):
            raise ConfigurationError(
                f"positive_ratio must lie in (0, 1], got {self.positive_ratio}")
        if self.class_separation < 0.0:
            raise ConfigurationError(
                f"class_separation must be >= 0, got {self.class_separation}")
        if self.noise_sigma <= 0.0:
            raise ConfigurationError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.n_pos_bags > 0 and self.positives_per_bag() < 1:
            raise ConfigurationError(
                "positive_ratio too small: a positive bag must contain at least one "
                f"positive instance (round({self.positive_ratio} * "
                f"{self.instances_per_bag}) = 0)")


def _class_means(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    # Negative mean at the origin; positive mean along the all-ones direction
    # scaled so the Euclidean distance equals class_separation.
    mean_neg = np.zeros(cfg.d_raw)
    mean_pos = np.full(cfg.d_raw, cfg.class_separation / math.sqrt(cfg.d_raw))
    return mean_neg, mean_pos


def _build_bag(bag_id: int, label: int, pos_mask: np.ndarray,
               cfg: SyntheticConfig, rng: np.random.Generator) -> Bag:
    mean_neg, mean_pos = _class_means(cfg)
    noise = rng.standard_normal((cfg.instances_per_bag, cfg.d_raw)) * cfg.noise_sigma
    means = np.where(pos_mask[:, None], mean_pos[None, :], mean_neg[None, :])
    feats = means + noise
    instances = [
        Instance(features=feats[j].copy(), truth_label=int(pos_mask[j]),
                 bag_index=bag_id, index_in_bag=j)
        for j in range(cfg.instances_per_bag)
    ]
    return Bag(bag_id=bag_id, label=label, instances=instances)


def generate_gaussian_mil(cfg: SyntheticConfig) -> MilDataset:
    """Generate bags of Gaussian class-conditional feature vectors.

    Each positive bag contains exactly ``round(positive_ratio *
    instances_per_bag)`` positive instances at seeded random positions;
    negative bags contain none.  Deterministic given ``cfg`` (including the
    seed).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_pos_inst = cfg.positives_per_bag()
    bags: list[Bag] = []
    for b in range(cfg.n_pos_bags):
        pos_mask = np.zeros(cfg.instances_per_bag, dtype=bool)
        positions = rng.choice(cfg.instances_per_bag, size=n_pos_inst, replace=False)
        pos_mask[positions] = True
        bags.append(_build_bag(b, 1, pos_mask, cfg, rng))
    for b in range(cfg.n_neg_bags):
        pos_mask = np.zeros(cfg.instances_per_bag, dtype=bool)
        bags.append(_build_bag(cfg.n_pos_bags + b, 0, pos_mask, cfg, rng))
    return MilDataset(bags=bags, d_raw=cfg.d_raw, has_instance_truth=True,
                      metadata=_generator_metadata("gaussian", cfg))


def _block_dims(n_cells: int, grid_side: int) -> tuple[int, int]:
    # Most-square factor pair h*w == n_cells with h <= w; square when n_cells
    # is a perfect square.
    best = None
    for h in range(1, int(math.isqrt(n_cells)) + 1):
        if n_cells % h == 0:
            best = (h, n_cells // h)
    assert best is not None
    h, w = best
    if w > grid_side:
        raise ConfigurationError(
            f"positive block of {n_cells} cells has no contiguous {h}x{w} placement "
            f"inside a {grid_side}x{grid_side} grid")
    return h, w


def generate_grid_mil(cfg: SyntheticConfig, grid_side: int) -> MilDataset:
    """Spatial variant: positive instances fill a contiguous block.

    Instance index j maps to cell (j // grid_side, j % grid_side).  The block
    is square whenever the positive count is a perfect square and otherwise
    the most-square rectangle with exactly that many cells, placed at a
    seeded random location.
    """
    cfg.validate()
    if grid_side < 1:
        raise ConfigurationError(f"grid_side must be >= 1, got {grid_side}")
    if cfg.instances_per_bag != grid_side * grid_side:
        raise ConfigurationError(
            f"instances_per_bag must equal grid_side**2 = {grid_side * grid_side}, "
            f"got {cfg.instances_per_bag}")
    n_pos_inst = cfg.positives_per_bag()
    block_h, block_w = _block_dims(n_pos_inst, grid_side)
    rng = np.random.default_rng(cfg.seed)
    bags: list[Bag] = []
    for b in range(cfg.n_pos_bags):
        r0 = int(rng.integers(0, grid_side - block_h + 1))
        c0 = int(rng.integers(0, grid_side - block_w + 1))
        idx = np.arange(cfg.instances_per_bag)
        rows, cols = idx // grid_side, idx % grid_side
        pos_mask = ((rows >= r0) & (rows < r0 + block_h)
                    & (cols >= c0) & (cols < c0 + block_w))
        bags.append(_build_bag(b, 1, pos_mask, cfg, rng))
    for b in range(cfg.n_neg_bags):
        pos_mask = np.zeros(cfg.instances_per_bag, dtype=bool)
        bags.append(_build_bag(cfg.n_pos_bags + b, 0, pos_mask, cfg, rng))
    meta = _generator_metadata("grid", cfg)
    meta["grid_side"] = str(grid_side)
    return MilDataset(bags=bags, d_raw=cfg.d_raw, has_instance_truth=True,
                      metadata=meta)


def _generator_metadata(kind: str, cfg: SyntheticConfig) -> dict[str, str]:
    return {
        "generator": kind,
        "n_pos_bags": str(cfg.n_pos_bags),
        "n_neg_bags": str(cfg.n_neg_bags),
        "instances_per_bag": str(cfg.instances_per_bag),
        "positive_ratio": repr(cfg.positive_ratio),
        "d_raw": str(cfg.d_raw),
        "class_separation": repr(cfg.class_separation),
        "noise_sigma": repr(cfg.noise_sigma),
        "seed": str(cfg.seed),
    }


def save_dataset(ds: MilDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": SCHEMA_ID, "d_raw": ds.d_raw, "metadata": ds.metadata}
        fh.write(json.dumps(header) + "\n")
        for bag in ds.bags:
            truths = [inst.truth_label for inst in bag.instances]
            record = {
                "bag_id": bag.bag_id,
                "label": bag.label,
                "instances": [inst.features.tolist() for inst in bag.instances],
                "truth": truths if all(t is not None for t in truths) else None,
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path, strip_truth: bool = False) -> MilDataset:
    """Load a dataset file; ``strip_truth`` discards instance labels on read."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"record 0 (header): invalid JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_ID:
        raise SchemaError(f"record 0 (header): expected schema {SCHEMA_ID!r}")
    d_raw = header.get("d_raw")
    if not isinstance(d_raw, int) or d_raw < 1:
        raise SchemaError("record 0 (header): d_raw must be a positive integer")
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaError("record 0 (header): metadata must be an object")

    bags: list[Bag] = []
    all_truth = True
    for rec_no, line in enumerate(lines[1:], start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"record {rec_no}: invalid JSON ({exc})") from exc
        bags.append(_bag_from_record(rec, rec_no, d_raw, len(bags), strip_truth))
        if any(inst.truth_label is None for inst in bags[-1].instances):
            all_truth = False
    if not bags:
        all_truth = False
    return MilDataset(bags=bags, d_raw=d_raw, has_instance_truth=all_truth,
                      metadata={str(k): str(v) for k, v in metadata.items()})


def _bag_from_record(rec, rec_no: int, d_raw: int, bag_index: int,
                     strip_truth: bool) -> Bag:
    if not isinstance(rec, dict):
        raise SchemaError(f"record {rec_no}: expected a JSON object")
    for key in ("bag_id", "label", "instances"):
        if key not in rec:
            raise SchemaError(f"record {rec_no}: missing key {key!r}")
    label = rec["label"]
    if label not in (0, 1):
        raise SchemaError(f"record {rec_no}: label must be 0 or 1, got {label!r}")
    rows = rec["instances"]
    if not isinstance(rows, list) or not rows:
        raise SchemaError(f"record {rec_no}: instances must be a non-empty list")
    truth = rec.get("truth")
    if truth is not None:
        if not isinstance(truth, list) or len(truth) != len(rows):
            raise SchemaError(
                f"record {rec_no}: truth must be null or one label per instance")
        if any(t not in (0, 1) for t in truth):
            raise SchemaError(f"record {rec_no}: truth labels must be 0 or 1")
        if label == 0 and any(t == 1 for t in truth):
            raise SchemaError(
                f"record {rec_no} (bag {rec['bag_id']}): negative bag contains a "
                "truth-positive instance; a bag is negative only when every "
                "instance is negative")
        if label == 1 and sum(truth) == 0:
            raise SchemaError(
                f"record {rec_no} (bag {rec['bag_id']}): positive bag must contain "
                "at least one truth-positive instance")
    instances = []
    for j, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != d_raw:
            raise SchemaError(
                f"record {rec_no}: instance {j} has feature length "
                f"{len(row) if isinstance(row, list) else 'non-list'}, expected {d_raw}")
        t = None if (truth is None or strip_truth) else int(truth[j])
        instances.append(Instance(
            features=np.asarray(row, dtype=np.float64),
            truth_label=t, bag_index=bag_index, index_in_bag=j))
    return Bag(bag_id=int(rec["bag_id"]), label=int(label), instances=instances)


def validate_dataset(ds: MilDataset) -> list[str]:
    """Check every structural invariant; returns human-readable violations."""
    violations: list[str] = []
    for bag in ds.bags:
        if not bag.instances:
            violations.append(f"bag {bag.bag_id}: empty instance list")
            continue
        if bag.label not in (0, 1):
            violations.append(f"bag {bag.bag_id}: label {bag.label!r} not in {{0, 1}}")
        for inst in bag.instances:
            if inst.features.shape != (ds.d_raw,):
                violations.append(
                    f"bag {bag.bag_id}: instance {inst.index_in_bag} feature length "
                    f"{inst.features.shape} != d_raw {ds.d_raw}")
            if inst.truth_label is not None and inst.truth_label not in (0, 1):
                violations.append(
                    f"bag {bag.bag_id}: instance {inst.index_in_bag} truth label "
                    f"{inst.truth_label!r} not in {{0, 1}}")
        truths = [i.truth_label for i in bag.instances]
        if all(t is not None for t in truths):
            if bag.label == 0 and any(t == 1 for t in truths):
                violations.append(
                    f"bag {bag.bag_id}: labeled negative but contains a "
                    "truth-positive instance")
            if bag.label == 1 and sum(truths) == 0:
                violations.append(
                    f"bag {bag.bag_id}: labeled positive but every instance truth "
                    "label is negative")
    every_truth = all(
        inst.truth_label is not None for b in ds.bags for inst in b.instances
    ) and bool(ds.bags)
    if ds.has_instance_truth != every_truth:
        violations.append(
            f"dataset: has_instance_truth={ds.has_instance_truth} but truth labels "
            f"{'all present' if every_truth else 'incomplete'}")
    return violations


def dataset_equal(a: MilDataset, b: MilDataset) -> bool:
    """Bit-exact equality including features, truth labels, and metadata."""
    if (a.d_raw != b.d_raw or a.has_instance_truth != b.has_instance_truth
            or a.metadata != b.metadata or len(a.bags) != len(b.bags)):
        return False
    for ba, bb in zip(a.bags, b.bags):
        if ba.bag_id != bb.bag_id or ba.label != bb.label:
            return False
        if len(ba.instances) != len(bb.instances):
            return False
        for ia, ib in zip(ba.instances, bb.instances):
            if ia.truth_label != ib.truth_label:
                return False
            if ia.bag_index != ib.bag_index or ia.index_in_bag != ib.index_in_bag:
                return False
            if not np.array_equal(ia.features, ib.features):
                return False
    return True
