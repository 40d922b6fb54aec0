"""Budget-matched attribution experiment: arm construction, training runs,
results persistence, and efficiency tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LABELS, SplitSpec, label_matrix, split_patients
from .encoders import MiniTextEncoder, PrecomputedEncoder, Tokenizer, text_spec
from .errors import InputError, SearchError
from .fusion import FusionConfig, FusionPathway
from .metrics import (EvalReport, evaluate_predictions, write_per_label_csv,
                      write_reports_csv)
from .model import ModelGraph
from .pet import AdapterConfig, LoRAConfig, apply_policy, count_params
from .training import TrainConfig, train_loop

ARM_KINDS = ("vision_only", "budget_matched", "full_pet", "full_finetune")

VISION_ONLY_PARAMS = 2048 * 512 + 512 * 14  # 1,055,744


# -- budget search ------------------------------------------------------------


def _search_head_hidden(d: int) -> int:
    """Head hidden width for a candidate shared dim: half of d, rounded down
    to a power of two (so candidate counts step coarsely and deterministically).
    """
    h = 1
    while h * 2 <= d // 2:
        h *= 2
    return h


def search_shared_dim(target: int, tolerance: float = 0.01,
                      num_labels: int = 14):
    """Smallest-|count - target| fusion config over shared dims 8..512 (step 8).

    Returns (d, head_hidden, count). Deterministic; ties go to smaller d.
    """
    candidates = []
    for d in range(8, 513, 8):
        h = _search_head_hidden(d)
        cfg = FusionConfig(shared_dim=d, head_hidden=h, num_labels=num_labels)
        candidates.append((abs(cfg.param_count() - target), d, h, cfg.param_count()))
    candidates.sort(key=lambda c: (c[0], c[1]))
    best = candidates[0]
    if best[0] / target > tolerance:
        nearest = [{"shared_dim": d, "head_hidden": h, "count": n}
                   for _, d, h, n in candidates[:3]]
        raise SearchError(f"no fusion config within {tolerance:.0%} of {target}; "
                          f"nearest: {nearest}")
    return best[1], best[2], best[3]


# -- models -------------------------------------------------------------------


class _Standardizer:
    """Per-feature z-scoring fitted once on the training split.

    Frozen-encoder features carry a large constant component that swamps the
    informative variation unless removed, so both arms standardize their
    inputs with training-set statistics (a fixed, deterministic transform).
    """

    def __init__(self):
        self.mu = None
        self.sd = None

    def fit(self, features: np.ndarray):
        self.mu = features.mean(axis=0)
        self.sd = features.std(axis=0) + 1e-6

    def apply(self, features: np.ndarray) -> np.ndarray:
        if self.mu is None:
            return features
        return (features - self.mu) / self.sd


class VisionOnlyModel:
    """Frozen vision features into a trainable bias-free 2048->512->14 head."""

    def __init__(self, seed: int = 0, hidden: int = 512, num_labels: int = 14):
        self.graph = ModelGraph()
        rng = ad.make_rng(seed, "init", "vision_only")
        self.graph.add_param("head/w1", rng.normal(0, 1 / np.sqrt(2048), (2048, hidden)),
                             trainable=True)
        self.graph.add_param("head/w2", rng.normal(0, 1 / np.sqrt(hidden), (hidden, num_labels)),
                             trainable=True)
        self.vision_norm = _Standardizer()

    def fit_normalizer(self, train_samples):
        self.vision_norm.fit(np.asarray([s.vision_features for s in train_samples]))

    def logits_batch(self, samples, training=False, epoch=0, seed=0):
        binding = self.graph.bind()
        v = ad.Tensor(self.vision_norm.apply(
            np.asarray([s.vision_features for s in samples])))
        h = ad.relu(ad.matmul(v, binding["head/w1"]))
        return ad.matmul(h, binding["head/w2"]), binding

    def loss_batch(self, samples, training, epoch, seed):
        logits, binding = self.logits_batch(samples, training, epoch, seed)
        return ad.bce_with_logits(logits, label_matrix(samples)), binding

    def predict(self, samples):
        logits, _ = self.logits_batch(samples)
        return logits.data

    def validation_auroc(self, samples):
        return _macro_auroc(self.predict(samples), label_matrix(samples))


class MultimodalModel:
    """Precomputed vision features + mini text encoder + fusion pathway."""

    def __init__(self, fusion_cfg: FusionConfig, tokenizer: Tokenizer,
                 seed: int = 0, text_encoder_spec=None, policy: str = "frozen",
                 lora_cfg: LoRAConfig | None = None,
                 adapter_cfg: AdapterConfig | None = None,
                 full_finetune: bool = False):
        self.graph = ModelGraph()
        self.vision = PrecomputedEncoder(fusion_cfg.vision_in)
        self.text = MiniTextEncoder(self.graph, tokenizer,
                                    spec=text_encoder_spec or text_spec(), seed=seed)
        self.fusion = FusionPathway(self.graph, fusion_cfg, seed=seed)
        self.cfg = fusion_cfg
        apply_policy(self.graph, policy, lora_cfg=lora_cfg,
                     adapter_cfg=adapter_cfg, seed=seed)
        if full_finetune:
            for p in self.graph.params.values():
                p.trainable = True
        self._text_cache: dict[str, np.ndarray] = {}
        self.vision_norm = _Standardizer()
        self.text_norm = _Standardizer()

    def fit_normalizer(self, train_samples):
        self.vision_norm.fit(np.asarray([s.vision_features
                                         for s in train_samples]))
        binding = self.graph.bind()
        feats = np.asarray([self.text.encode(binding, s.text).data[0]
                            for s in train_samples])
        self.text_norm.fit(feats)

    def _text_is_static(self) -> bool:
        pfx = self.text.prefix
        if any(p.trainable for a, p in self.graph.params.items() if a.startswith(pfx)):
            return False
        return not any(a.startswith(pfx) for a in list(self.graph.loras) +
                       list(self.graph.adapters))

    def _text_features(self, binding, samples):
        if self._text_is_static():
            missing = [s for s in samples if s.id not in self._text_cache]
            if missing:
                for s in missing:
                    self._text_cache[s.id] = self.text.encode(binding, s.text).data[0]
            return ad.Tensor(np.asarray([self._text_cache[s.id] for s in samples]))
        return ad.concat_rows([self.text.encode(binding, s.text) for s in samples])

    def _standardize_text(self, t):
        if self.text_norm.mu is None:
            return t
        # affine transform expressed through the graph so gradients still
        # reach the encoder when it holds trainable parameters
        shift = ad.Tensor(-self.text_norm.mu)
        scale = ad.Tensor(1.0 / self.text_norm.sd)
        return ad.mul(ad.add(t, shift), scale)

    def logits_batch(self, samples, training=False, epoch=0, seed=0):
        binding = self.graph.bind()
        v = ad.Tensor(self.vision_norm.apply(
            np.asarray([s.vision_features for s in samples])))
        t = self._standardize_text(self._text_features(binding, samples))
        rng = None
        if training and self.cfg.dropout_p > 0:
            # one mask row per sample, keyed by (seed, epoch, sample id) so the
            # trajectory is invariant to micro-batch boundaries
            rows = [ad.make_rng(seed, "dropout", epoch, s.id)
                    .random(self.cfg.shared_dim) for s in samples]
            rng = _FixedMaskRng(np.asarray(rows))
        return self.fusion.forward(binding, v, t, training=training,
                                   dropout_rng=rng), binding

    def loss_batch(self, samples, training, epoch, seed):
        logits, binding = self.logits_batch(samples, training, epoch, seed)
        return ad.bce_with_logits(logits, label_matrix(samples)), binding

    def predict(self, samples):
        logits, _ = self.logits_batch(samples)
        return logits.data

    def validation_auroc(self, samples):
        return _macro_auroc(self.predict(samples), label_matrix(samples))


class _FixedMaskRng:
    """Adapter exposing .random() over precomputed per-sample uniform rows."""

    def __init__(self, rows: np.ndarray):
        self.rows = rows

    def random(self, shape):
        assert shape == self.rows.shape, (shape, self.rows.shape)
        return self.rows


def _macro_auroc(logits, labels):
    from .metrics import UndefinedMetric, auroc_label, macro_average
    vals, mask = [], []
    for j in range(labels.shape[1]):
        try:
            vals.append(auroc_label(logits[:, j], labels[:, j]))
            mask.append(True)
        except UndefinedMetric:
            vals.append(0.0)
            mask.append(False)
    return macro_average(vals, mask)


# -- plans ---------------------------------------------------------------------


@dataclass
class ArmSpec:
    name: str
    kind: str
    policy: str = "frozen"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    budget_target: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class ExperimentPlan:
    arms: list[ArmSpec]
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if not self.arms:
            raise InputError("plan has no arms")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise InputError("arm names must be unique")
        for a in self.arms:
            if not a.seeds:
                raise InputError(f"arm {a.name!r} has no seeds")
            if a.kind not in ARM_KINDS:
                raise InputError(f"unknown arm kind {a.kind!r}")


def build_arm(kind: str, overrides: dict | None = None) -> ArmSpec:
    """Canonical arm configs for the attribution triad plus full fine-tuning."""
    if kind not in ARM_KINDS:
        raise InputError(f"unknown arm kind {kind!r}")
    overrides = dict(overrides or {})
    seeds = overrides.pop("seeds", [0])
    policy = overrides.pop("policy", "frozen")
    if kind == "vision_only":
        arm = ArmSpec("vision_only", kind, policy="frozen",
                      budget_target=VISION_ONLY_PARAMS, seeds=seeds)
    elif kind == "budget_matched":
        d, h, count = search_shared_dim(VISION_ONLY_PARAMS)
        arm = ArmSpec("budget_matched", kind, policy="frozen",
                      fusion=FusionConfig(shared_dim=d, head_hidden=h),
                      budget_target=count, seeds=seeds)
    elif kind == "full_pet":
        arm = ArmSpec("full_pet", kind, policy=policy,
                      budget_target=FusionConfig().param_count(), seeds=seeds)
    else:
        arm = ArmSpec("full_finetune", kind, policy="frozen", seeds=seeds)
    for key, value in overrides.items():
        if key == "fusion":
            arm.fusion = replace(arm.fusion, **value)
        elif hasattr(arm, key):
            setattr(arm, key, value)
        else:
            raise InputError(f"unknown arm override {key!r}")
    return arm


def _build_model(arm: ArmSpec, tokenizer, seed: int,
                 text_encoder_spec=None):
    if arm.kind == "vision_only":
        return VisionOnlyModel(seed=seed)
    return MultimodalModel(arm.fusion, tokenizer, seed=seed,
                           text_encoder_spec=text_encoder_spec,
                           policy=arm.policy,
                           full_finetune=arm.kind == "full_finetune")


@dataclass
class AttributionResult:
    per_arm: dict[str, list[EvalReport]]
    arm_means: dict[str, float]
    fusion_effect: float | None
    scaling_effect: float | None
    failures: dict[str, str] = field(default_factory=dict)


def compute_deltas(arm_means: dict[str, float]):
    """Fusion effect: budget-matched minus vision-only; scaling effect:
    full PET minus budget-matched. None when an arm is missing."""
    fusion_effect = scaling_effect = None
    if "budget_matched" in arm_means and "vision_only" in arm_means:
        fusion_effect = arm_means["budget_matched"] - arm_means["vision_only"]
    if "full_pet" in arm_means and "budget_matched" in arm_means:
        scaling_effect = arm_means["full_pet"] - arm_means["budget_matched"]
    return fusion_effect, scaling_effect


def run_plan(plan: ExperimentPlan, samples, out_dir,
             text_encoder_spec=None) -> AttributionResult:
    """Train every arm x seed, evaluate on the test split, persist artifacts."""
    plan.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set, test_set = split_patients(samples, plan.split)
    tokenizer = Tokenizer.build([s.text for s in train_set])
    test_labels = label_matrix(test_set)

    per_arm: dict[str, list[EvalReport]] = {}
    failures: dict[str, str] = {}
    all_reports = []
    for arm in plan.arms:
        reports = []
        for seed in arm.seeds:
            try:
                model = _build_model(arm, tokenizer, seed, text_encoder_spec)
                cfg = replace(plan.train, seed=seed)
                train_loop(model, train_set, val_set, cfg)
                budget = count_params(model.graph)
                probs = 1.0 / (1.0 + np.exp(-model.predict(test_set)))
                rep = evaluate_predictions(arm.name, seed, probs, test_labels,
                                           LABELS, budget.total_trainable,
                                           budget.total_params)
                reports.append(rep)
            except Exception as e:  # record and continue with other arms
                failures[f"{arm.name}/seed{seed}"] = f"{type(e).__name__}: {e}"
        if reports:
            per_arm[arm.name] = reports
            write_reports_csv(out / f"arm_{arm.name}.csv", reports)
            write_per_label_csv(out / f"arm_{arm.name}_per_label.csv", reports, LABELS)
            all_reports.extend(reports)

    arm_means = {name: float(np.mean([r.auroc_macro for r in reps]))
                 for name, reps in per_arm.items()}
    fusion_effect, scaling_effect = compute_deltas(arm_means)

    write_reports_csv(out / "summary.csv", all_reports)
    with open(out / "attribution.json", "w") as f:
        json.dump({"arm_mean_auroc": arm_means,
                   "fusion_effect": fusion_effect,
                   "scaling_effect": scaling_effect,
                   "failures": failures}, f, indent=2, sort_keys=True)
    with open(out / "efficiency.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "auroc", "trainable_params",
                    "auroc_per_million", "efficiency_ratio"])
        for row in efficiency_table([
                {"method": name,
                 "auroc": arm_means[name],
                 "trainable_params": per_arm[name][0].trainable_params}
                for name in per_arm]):
            w.writerow([row["method"], f"{row['auroc']:.6f}",
                        row["trainable_params"], row["auroc_per_million"],
                        row["efficiency_ratio"]])
    return AttributionResult(per_arm, arm_means, fusion_effect, scaling_effect,
                             failures)


def efficiency_table(results):
    """AUROC-per-million-trainable-params rows; reference ratio is row 1."""
    rows = []
    for r in results:
        params = r["trainable_params"]
        if params <= 0:
            rows.append({**r, "auroc_per_million": None,
                         "efficiency_ratio": "undefined"})
            continue
        # reported in milli-AUROC per million trainable parameters so the
        # headline numbers land in a readable integer range
        rows.append({**r, "auroc_per_million":
                     round(1000 * r["auroc"] / (params / 1e6))})
    ref = next((row["auroc_per_million"] for row in rows
                if row.get("auroc_per_million")), None)
    for row in rows:
        if row.get("efficiency_ratio") == "undefined":
            continue
        apm = row["auroc_per_million"]
        row["efficiency_ratio"] = (f"{apm / ref:.2f}x" if ref else "undefined")
    return rows


def recompute_from_artifacts(out_dir):
    """Re-derive attribution deltas purely from the stored per-arm CSVs."""
    out = Path(out_dir)
    arm_means = {}
    for path in sorted(out.glob("arm_*.csv")):
        if path.name.endswith("_per_label.csv"):
            continue
        with open(path) as f:
            rows = list(csv.DictReader(f))
        if rows:
            arm_means[rows[0]["method"]] = float(
                np.mean([float(r["auroc_macro"]) for r in rows]))
    fusion_effect, scaling_effect = compute_deltas(arm_means)
    return {"arm_mean_auroc": arm_means, "fusion_effect": fusion_effect,
            "scaling_effect": scaling_effect}
