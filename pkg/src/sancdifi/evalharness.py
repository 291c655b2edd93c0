"""Clean-accuracy reduction, attack success rate and the experiment matrix.

Every random choice in an experiment is derived from one replicate seed
with :func:`derive_seed` under the keys listed in :data:`SEED_KEYS`, and
each replicate seed is derived from the run's master seed under
``"replicate"``.  Rerunning with the same configuration therefore
reproduces every report bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import make_badnet_trigger, make_invisible_trigger, pgd_attack, poison_dataset
from .config import RunConfig, config_to_dict
from .core import ParameterError, derive_seed
from .datagen import LabeledDataset, ShapeDatasetSpec, train_val_split
from .diffusion import PurifyConfig, purify
from .sancdifi import SancdifiConfig, visible_masks
from .training import TrainConfig, TrojanQualityError, train_classifier, train_noise_predictor, \
    train_trojan_classifier, trojan_quality

__all__ = [
    "ATTACKS",
    "Defense",
    "MetricsReport",
    "ExperimentSpec",
    "ReportBundle",
    "ExperimentSetup",
    "ExperimentRunner",
    "eval_clean_accuracy",
    "eval_asr",
    "topk_hits",
    "build_setup",
    "run_experiment",
    "run_matrix",
    "ablation_suite",
    "replicate_seeds",
    "CSV_HEADER",
]

log = logging.getLogger(__name__)

ATTACKS = ("badnet", "invisible", "pgd")
CSV_HEADER = ("experiment", "attack", "defense", "k", "clean_acc_nodef", "clean_acc_def", "CAR", "ASR", "n", "seed")
ASR_POPULATION = ("ASR counts validation images whose true label differs from the target label; "
                  "for PGD it counts every image whose post-defense prediction equals its "
                  "adversarial label when that label differs from the true one")
SEED_KEYS = {
    "data": "data",
    "clean classifier": "model/clean",
    "badnet trojan": "model/badnet",
    "invisible trojan": "model/invisible",
    "invisible pattern": "trigger/invisible",
    "denoiser": "model/denoiser",
    "saliency and purification": "sancdifi",
}


def topk_hits(probs, labels, k):
    """Boolean per row: is ``labels[i]`` among the ``k`` highest scores (stable ties)."""
    probs = np.asarray(probs)
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    k = int(min(max(k, 1), probs.shape[1]))
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels).reshape(-1, 1)).any(axis=1)


def _pct(hits):
    return 100.0 * float(np.mean(hits)) if len(hits) else 0.0


def _apply(defense, X):
    return X if defense is None else np.asarray(defense(X))


def eval_clean_accuracy(f, defense, data: LabeledDataset, k=1) -> float:
    """Percentage of images whose true label is in the top-``k`` of ``f(defense(x))``.

    ``defense`` is a callable on unit-domain batches or ``None`` for identity.
    """
    if len(data) == 0:
        return 0.0
    return _pct(topk_hits(f.predict_proba(_apply(defense, data.images)), data.labels, k))


def eval_asr(f, defense, data: LabeledDataset, trigger, k=1) -> float:
    """Percentage of triggered images whose target label is in the top-``k`` after defense.

    Images already labelled with the target are excluded before triggering.
    """
    poisoned = poison_dataset(data, trigger, mode="all")
    if len(poisoned) == 0:
        return 0.0
    return _pct(topk_hits(f.predict_proba(_apply(defense, poisoned.images)), poisoned.labels, k))


@dataclass(frozen=True)
class Defense:
    """``kind`` is one of none, sancdifi, sancdifi_no_phase2, diffpure.

    ``t2`` overrides the complement-phase length for sancdifi; ``fraction``
    is the diffpure depth as a share of ``T``.
    """

    kind: str = "none"
    t2: int | None = None
    fraction: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "sancdifi", "sancdifi_no_phase2", "diffpure"):
            raise ParameterError(f"unknown defense {self.kind!r}")
        if self.kind == "diffpure" and (self.fraction is None or not 0.0 <= self.fraction <= 1.0):
            raise ParameterError("diffpure needs a fraction in [0, 1]")

    @property
    def name(self):
        if self.kind == "diffpure":
            return f"diffpure_{round(100 * self.fraction):d}"
        if self.kind == "sancdifi" and self.t2 is not None:
            return f"sancdifi_t2_{self.t2}"
        return self.kind

    @classmethod
    def parse(cls, text):
        """Inverse of :attr:`name`, e.g. ``"diffpure_30"`` or ``"sancdifi_t2_150"``."""
        if text.startswith("diffpure_"):
            return cls("diffpure", fraction=float(text[len("diffpure_"):]) / 100.0)
        if text.startswith("sancdifi_t2_"):
            return cls("sancdifi", t2=int(text[len("sancdifi_t2_"):]))
        return cls(text)


@dataclass
class MetricsReport:
    """One experiment cell.  Accuracies and ASR are percentages; CAR is in points."""

    experiment: str
    attack: str
    defense: str
    top_k: int
    clean_acc_no_defense: float
    clean_acc_with_defense: float
    ASR: float
    n_clean: int
    n_attacked: int
    seed: int
    errors: list = field(default_factory=list)

    @property
    def CAR(self):
        return self.clean_acc_no_defense - self.clean_acc_with_defense

    def row(self):
        return [self.experiment, self.attack, self.defense, self.top_k, _fmt(self.clean_acc_no_defense),
                _fmt(self.clean_acc_with_defense), _fmt(self.CAR), _fmt(self.ASR), self.n_clean, self.seed]

    def to_dict(self):
        d = asdict(self)
        d["CAR"] = self.CAR
        return d


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


@dataclass
class ExperimentSpec:
    """One cell of the matrix: an attack, a defense and a replicate seed under ``config``."""

    config: RunConfig = field(default_factory=RunConfig)
    attack: str = "badnet"
    defense: Defense = field(default_factory=Defense)
    seed: int = 0
    ks: tuple = (1,)
    experiment: str = "main"

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ParameterError(f"unknown attack {self.attack!r}")
        if isinstance(self.defense, str):
            self.defense = Defense.parse(self.defense)
        K = self.config.dataset.n_classes
        if any(k < 1 or k > K for k in self.ks):
            raise ParameterError(f"top-k values must lie in [1, {K}]")
        if self.config.attack.target_label >= K:
            raise ParameterError("attack target label is not a valid class")


# construction of components from a RunConfig

def dataset_spec(cfg: RunConfig, seed) -> ShapeDatasetSpec:
    d = cfg.dataset
    return ShapeDatasetSpec(d.image_size, d.n_classes, d.per_class_count, d.noise_std, d.channels, d.jitter,
                            derive_seed(seed, SEED_KEYS["data"]), tuple(d.fg_range), tuple(d.bg_range), d.glyph_scale)


def classifier_train_config(cfg: RunConfig, seed, poison_fraction=0.0) -> TrainConfig:
    c, m = cfg.models.classifier, cfg.models
    return TrainConfig(c.epochs, c.batch_size, c.learning_rate, seed, c.optimizer, poison_fraction,
                       m.min_clean_accuracy, m.min_attack_success, m.max_attempts)


def make_trigger(cfg: RunConfig, attack, seed):
    d, a = cfg.dataset, cfg.attack
    if attack == "badnet":
        return make_badnet_trigger(d.image_size, a.badnet.patch_size, a.badnet.corner, a.target_label, d.channels)
    if attack == "invisible":
        return make_invisible_trigger(d.image_size, a.invisible.epsilon, a.target_label,
                                      derive_seed(seed, SEED_KEYS["invisible pattern"]), d.channels)
    raise ParameterError(f"{attack!r} is not a trigger attack")


def sancdifi_config(cfg: RunConfig, seed, T2=None) -> SancdifiConfig:
    s = cfg.sancdifi
    return SancdifiConfig(s.T1, s.T2 if T2 is None else T2, s.n_masks, s.d, s.r, s.cell_grid, s.keep_prob,
                          s.baseline, s.T, s.beta_start, s.beta_end, derive_seed(seed, SEED_KEYS["saliency and purification"]),
                          s.final_step_noise)


def train_denoiser(cfg: RunConfig, data: LabeledDataset, seed):
    dn, s = cfg.models.denoiser, cfg.sancdifi
    tc = TrainConfig(dn.epochs, dn.batch_size, dn.learning_rate, derive_seed(seed, SEED_KEYS["denoiser"]))
    return train_noise_predictor(data, tc, s.T, s.beta_start, s.beta_end, dn.hidden)


def train_victim(cfg: RunConfig, attack, train: LabeledDataset, validation: LabeledDataset, seed):
    if attack == "pgd":
        return train_classifier(train, classifier_train_config(cfg, derive_seed(seed, SEED_KEYS["clean classifier"])))
    fraction = getattr(cfg.attack, attack).poison_fraction
    tc = classifier_train_config(cfg, derive_seed(seed, SEED_KEYS[f"{attack} trojan"]), fraction)
    return train_trojan_classifier(train, make_trigger(cfg, attack, seed), tc, validation)


@dataclass
class ExperimentSetup:
    """Data, triggers and trained models for one replicate seed.  Models train on first use."""

    config: RunConfig
    seed: int
    train: LabeledDataset
    validation: LabeledDataset
    evaluation: LabeledDataset
    models: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def victim(self, attack):
        if attack in self.failures:
            raise self.failures[attack]
        if attack not in self.models:
            try:
                model = train_victim(self.config, attack, self.train, self.validation, self.seed)
            except TrojanQualityError as exc:
                self.failures[attack] = exc
                raise
            if attack != "pgd":
                clean, asr = trojan_quality(model, self.validation, make_trigger(self.config, attack, self.seed))
                self.quality[attack] = {"clean_accuracy": 100 * clean, "attack_success": 100 * asr}
            else:
                acc = float(np.mean(model.predict(self.validation.images) == self.validation.labels))
                self.quality[attack] = {"clean_accuracy": 100 * acc}
            self.models[attack] = model
        return self.models[attack]

    @property
    def denoiser(self):
        if "denoiser" not in self.models:
            self.models["denoiser"] = train_denoiser(self.config, self.train, self.seed)
        return self.models["denoiser"]


def build_setup(cfg: RunConfig, seed) -> ExperimentSetup:
    train, validation = train_val_split(dataset_spec(cfg, seed), cfg.dataset.val_per_class)
    n_eval = min(cfg.experiment.n_eval_per_class, cfg.dataset.val_per_class) * cfg.dataset.n_classes
    # labels cycle through the classes, so a prefix is class-balanced
    return ExperimentSetup(cfg, seed, train, validation, validation.subset(slice(0, n_eval)))


class ExperimentRunner:
    """Evaluates cells for one replicate, caching masks and purifications.

    Saliency masks and the phase-1 output depend only on the attack and the
    image set, so the full pipeline, the no-phase-2 ablation and the
    alternative phase-2 lengths share them.
    """

    def __init__(self, setup: ExperimentSetup):
        self.setup = setup
        self.cfg = setup.config
        self.scfg = sancdifi_config(self.cfg, setup.seed)
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def inputs(self, attack, role):
        """``(X, labels, true_labels)``; labels are the ones a hit is scored against."""
        return self._memo(("inputs", attack, role), lambda: self._inputs(attack, role))

    def _inputs(self, attack, role):
        data = self.setup.evaluation
        if role == "clean":
            return data.images.astype(np.float64), data.labels, data.labels
        f = self.setup.victim(attack)
        if attack == "pgd":
            p = self.cfg.attack.pgd
            adv = pgd_attack(f, data.images, data.labels, p.epsilon, p.steps, p.step_size)
            return adv, f.predict(adv), data.labels
        trigger = make_trigger(self.cfg, attack, self.setup.seed)
        poisoned = poison_dataset(data, trigger, mode="all")
        true = data.labels[data.labels != trigger.target_label]
        return poisoned.images.astype(np.float64), poisoned.labels, true

    def masks(self, attack, role):
        return self._memo(("masks", attack, role), lambda: visible_masks(
            self.inputs(attack, role)[0], self.setup.victim(attack), self.scfg))

    def _phase1(self, attack, role):
        return self._memo(("phase1", attack, role), lambda: purify(
            self.inputs(attack, role)[0], self.masks(attack, role), self.scfg.phase(1), self.setup.denoiser))

    def defended(self, attack, role, defense: Defense):
        return self._memo(("defended", attack, role, defense), lambda: self._defend(attack, role, defense))

    def _defend(self, attack, role, defense: Defense):
        X = self.inputs(attack, role)[0]
        if len(X) == 0 or defense.kind == "none":
            return X
        if defense.kind == "diffpure":
            t_stop = int(round(defense.fraction * self.scfg.T))
            pc = PurifyConfig(self.scfg.schedule, t_stop, self.scfg.seed, self.scfg.final_step_noise,
                              stream="sancdifi/phase1")
            return purify(X, np.zeros(X.shape[1:3]), pc, self.setup.denoiser)
        y1 = self._phase1(attack, role)
        if defense.kind == "sancdifi_no_phase2":
            return y1
        scfg = self.scfg if defense.t2 is None else replace(self.scfg, T2=defense.t2)
        if scfg.T2 == 0:
            return y1
        return purify(y1, 1 - self.masks(attack, role), scfg.phase(2), self.setup.denoiser)

    def _probs(self, attack, role, defense):
        def compute():
            X = self.defended(attack, role, defense)
            if len(X) == 0:
                return np.zeros((0, self.cfg.dataset.n_classes))
            return self.setup.victim(attack).predict_proba(X)
        return self._memo(("probs", attack, role, defense), compute)

    def report(self, attack, defense: Defense, k=1, experiment="main") -> MetricsReport:
        none = Defense("none")
        _, y, _ = self.inputs(attack, "clean")
        acc0 = _pct(topk_hits(self._probs(attack, "clean", none), y, k))
        acc1 = _pct(topk_hits(self._probs(attack, "clean", defense), y, k))
        _, labels, true = self.inputs(attack, "attacked")
        hits = topk_hits(self._probs(attack, "attacked", defense), labels, k)
        if attack == "pgd":
            hits = hits & (labels != true)
        return MetricsReport(experiment, attack, defense.name, int(k), acc0, acc1, _pct(hits), len(y), len(labels),
                             int(self.setup.seed))


def replicate_seeds(cfg: RunConfig):
    return [derive_seed(cfg.master_seed, "replicate", i) for i in range(cfg.experiment.replicates)]


def run_experiment(spec: ExperimentSpec, setup: ExperimentSetup | None = None):
    """Reports for one cell (one per top-k value).  Raises on Trojan quality failure."""
    setup = setup or build_setup(spec.config, spec.seed)
    runner = ExperimentRunner(setup)
    reports = [runner.report(spec.attack, spec.defense, k, spec.experiment) for k in spec.ks]
    return reports[0] if len(reports) == 1 else reports


@dataclass
class ReportBundle:
    """Reports for a set of cells over all replicates, plus reproduction metadata."""

    config: RunConfig
    reports: list = field(default_factory=list)
    quality: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @property
    def seeds(self):
        return replicate_seeds(self.config)

    def select(self, attack=None, defense=None, k=1, experiment=None):
        return [r for r in self.reports if (attack is None or r.attack == attack)
                and (defense is None or r.defense == defense) and r.top_k == k
                and (experiment is None or r.experiment == experiment)]

    def mean(self, field_name, attack, defense, k=1):
        # a cell listed under several experiments counts once per seed
        by_seed = {}
        for r in self.select(attack, defense, k):
            by_seed.setdefault(r.seed, getattr(r, field_name))
        return float(np.mean(list(by_seed.values()))) if by_seed else float("nan")

    def summary(self):
        """Seed-averaged rows, one per (experiment, attack, defense, k)."""
        groups = {}
        for r in self.reports:
            groups.setdefault((r.experiment, r.attack, r.defense, r.top_k), []).append(r)
        out = []
        for (exp, attack, defense, k), rs in groups.items():
            m = lambda name: float(np.mean([getattr(r, name) for r in rs]))
            out.append(MetricsReport(exp, attack, defense, k, m("clean_acc_no_defense"), m("clean_acc_with_defense"),
                                     m("ASR"), rs[0].n_clean, rs[0].n_attacked, "mean"))
        return out

    def csv_text(self, reports=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.reports if reports is None else reports:
            w.writerow(r.row())
        return buf.getvalue()

    def metadata(self):
        return {
            "config": config_to_dict(self.config),
            "master_seed": self.config.master_seed,
            "replicate_seeds": self.seeds,
            "seed_derivation": {"replicate": "derive_seed(master_seed, 'replicate', i)",
                                **{k: f"derive_seed(replicate_seed, {v!r})" for k, v in SEED_KEYS.items()}},
            "asr_population": ASR_POPULATION,
            "top_k_note": "top-k values are reported as evaluated; top-5 only appears when K >= 5",
            "model_quality": self.quality,
            "errors": self.errors,
            "reports": [r.to_dict() for r in self.reports],
        }

    def write(self, out_dir, prefix="metrics"):
        """Write ``<prefix>.csv``, ``<prefix>_summary.csv`` and ``<prefix>_report.json``."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "csv": os.path.join(out_dir, f"{prefix}.csv"),
            "summary": os.path.join(out_dir, f"{prefix}_summary.csv"),
            "report": os.path.join(out_dir, f"{prefix}_report.json"),
        }
        for key, text in (("csv", self.csv_text()), ("summary", self.csv_text(self.summary())),
                          ("report", json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")):
            with open(paths[key], "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return paths


def matrix_cells(cfg: RunConfig):
    """``(experiment, attack, defense)`` cells of the configured main matrix."""
    return [("main", a, Defense.parse(d)) for a in cfg.experiment.attacks for d in cfg.experiment.defenses]


def ablation_cells(cfg: RunConfig):
    """Cells of the ablation grid: saliency removed, phase 2 removed, phase-2 length."""
    attacks = cfg.experiment.attacks
    cells = [("main", a, Defense(d)) for a in attacks for d in ("none", "sancdifi")]
    cells += [("no_saliency", a, Defense("diffpure", fraction=f)) for a in attacks
              for f in cfg.experiment.diffpure_fractions]
    cells += [("no_phase2", a, Defense("sancdifi_no_phase2")) for a in attacks]
    cells += [("phase2_steps", a, Defense("sancdifi", t2=s)) for a in attacks if a != "pgd"
              for s in cfg.experiment.phase2_steps]
    return cells


def _run_replicate(cfg: RunConfig, seed, cells):
    setup = build_setup(cfg, seed)
    runner = ExperimentRunner(setup)
    reports, errors, failed = [], [], set()
    for exp, attack, defense in cells:
        for k in cfg.experiment.ks:
            try:
                reports.append(runner.report(attack, defense, k, exp))
            except TrojanQualityError as exc:
                if attack not in failed:
                    failed.add(attack)
                    errors.append({"seed": seed, "attack": attack, "error": str(exc), "attempts": exc.attempts})
                nan = float("nan")
                reports.append(MetricsReport(exp, attack, defense.name, int(k), nan, nan, nan, 0, 0, int(seed),
                                             [str(exc)]))
    return reports, setup.quality, errors


def run_matrix(cfg: RunConfig, cells=None, workers=1) -> ReportBundle:
    """Evaluate ``cells`` (default: the configured main matrix) for every replicate seed.

    Replicates are independent, so ``workers > 1`` spreads them over
    processes; the result does not depend on the worker count.
    """
    cells = matrix_cells(cfg) if cells is None else list(cells)
    ks = cfg.experiment.ks
    if any(k < 1 or k > cfg.dataset.n_classes for k in ks):
        raise ParameterError(f"top-k values must lie in [1, {cfg.dataset.n_classes}]")
    seeds = replicate_seeds(cfg)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, [cfg] * len(seeds), seeds, [cells] * len(seeds)))
    else:
        results = [_run_replicate(cfg, s, cells) for s in seeds]
    bundle = ReportBundle(cfg)
    for seed, (reports, quality, errors) in zip(seeds, results):
        bundle.reports.extend(reports)
        bundle.quality[str(seed)] = quality
        bundle.errors.extend(errors)
    return bundle


def ablation_suite(cfg: RunConfig | None = None, workers=1) -> ReportBundle:
    """Saliency, phase-2 and phase-2-length ablations alongside the main cells."""
    cfg = cfg or RunConfig()
    return run_matrix(cfg, ablation_cells(cfg), workers)
