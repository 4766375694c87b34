"""Pool-based active-learning loop, experiment runners and run-directory output.

A cycle re-initialises the detector from a seed derived from the master seed
and the cycle index, trains it on the labeled set, evaluates it on the test
set, scores the unlabeled pool and moves the top-``budget`` images over.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acquisition as acq
from .autodiff import save_params
from .detector import NetworkConfig, detect, init_params
from .evaluation import detections_as_tuples, mean_average_precision, scene_ground_truth
from .losses import OptimizerConfig, TrainingDiverged, train, write_loss_curve
from .scenes import DatasetSpec, generate_dataset, split
from .uncertainty import TYPES, detection_uncertainties

log = logging.getLogger(__name__)

METHODS = ("mdn", "random", "entropy", "coreset")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(
        n_scenes=2500, class_weights=(0.55, 0.25, 0.12, 0.08), occlusion_prob=0.1,
        box_jitter_sd=0.5, pixel_noise_sd=0.03, seed=2021))
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(steps=300, epochs=40.0))
    test_fraction: float = 0.2
    split_seed: int = 0
    initial_labeled: int = 100
    budget: int = 100
    cycles: int = 5
    acquisition: str = "mdn"
    aggregation: str = "max_all"
    uncertainty_reduce: str = "predicted"
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.acquisition not in METHODS:
            raise ValueError(f"unknown acquisition {self.acquisition!r}; choose from {METHODS}")
        acq.AggregationMode.parse(self.aggregation)

    @property
    def mode(self) -> acq.AggregationMode:
        return acq.AggregationMode.parse(self.aggregation)

    def validate(self, pool_size: int) -> None:
        if self.initial_labeled + self.cycles * self.budget > pool_size:
            raise ValueError(f"initial {self.initial_labeled} + {self.cycles} x {self.budget} exceeds "
                             f"train pool of {pool_size}")


# ---------------------------------------------------------------- config files

_SECTIONS = {"dataset": DatasetSpec, "network": NetworkConfig, "optimizer": OptimizerConfig}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return "; ".join(", ".join(_fmt(x) for x in row) for row in v)
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, default, name: str):
    t = text.strip()
    if t.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if t.lower() not in ("true", "false"):
                raise ValueError(t)
            return t.lower() == "true"
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, str):
            return t
        if isinstance(default, tuple) and default and isinstance(default[0], tuple):
            return tuple(tuple(float(x) if "." in x else int(x) for x in row.split(","))
                         for row in t.split(";") if row.strip())
        if isinstance(default, tuple) or default is None:
            return tuple(float(x) if ("." in x or "e" in x.lower()) else int(x)
                         for x in t.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"bad value for {name}: {text!r}") from None
    raise ValueError(f"cannot parse {name}")


def _section_to(cls, section, defaults):
    kw = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key, text in section.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in [{section.name}]")
        kw[key] = _parse_value(text, getattr(defaults, key), f"{section.name}.{key}")
    return dataclasses.replace(defaults, **kw)


def load_config(path) -> ExperimentConfig:
    """Read an INI-style file with [dataset], [network], [optimizer] and [experiment] sections."""
    # only "#" starts inline comments; ";" separates backbone layers
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ValueError(f"malformed config {path}: {exc}") from None
    base = ExperimentConfig()
    unknown = set(cp.sections()) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    parts = {name: _section_to(cls, cp[name], getattr(base, name)) if cp.has_section(name)
             else getattr(base, name) for name, cls in _SECTIONS.items()}
    top = {}
    if cp.has_section("experiment"):
        fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
        for key, text in cp["experiment"].items():
            if key not in fields or key in _SECTIONS:
                raise ValueError(f"unknown key {key!r} in [experiment]")
            top[key] = _parse_value(text, getattr(base, key), f"experiment.{key}")
    return dataclasses.replace(base, **parts, **top)


def dump_config(cfg: ExperimentConfig, path) -> None:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    lines.append("[experiment]")
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- data

@dataclass
class PoolData:
    train: dict  # id -> Scene
    test: list

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "PoolData":
        scenes = generate_dataset(cfg.dataset)
        train_set, test_set = split(scenes, (1.0 - cfg.test_fraction, cfg.test_fraction), cfg.split_seed)
        return cls({s.id: s for s in train_set}, test_set)

    def scenes(self, ids) -> list:
        return [self.train[i] for i in ids]


# ---------------------------------------------------------------- state

@dataclass
class CycleRecord:
    cycle: int
    labeled_count: int
    map50: float
    map75: float
    selection: list
    init_hash: str
    final_loss: float
    wall_sec: float = 0.0


@dataclass
class ALState:
    master_seed: int
    labeled: list
    unlabeled: list
    cycle: int = 0
    records: list = field(default_factory=list)
    exhausted: bool = False
    aborted: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ALState":
        d = json.loads(text)
        d["records"] = [CycleRecord(**r) for r in d["records"]]
        return cls(**d)


def initial_state(cfg: ExperimentConfig, data: PoolData, master_seed: int) -> ALState:
    ids = sorted(data.train)
    cfg.validate(len(ids))
    rng = np.random.default_rng([master_seed, 0x1A1])
    labeled = sorted(int(i) for i in rng.choice(ids, size=cfg.initial_labeled, replace=False))
    chosen = set(labeled)
    return ALState(master_seed, labeled, [i for i in ids if i not in chosen])


def cycle_seed(master_seed: int, cycle: int) -> int:
    return int(master_seed) ^ int(cycle)


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- one cycle

@dataclass
class TrainedModel:
    params: dict
    curve: list
    map50: float
    map75: float
    init_hash: str


class ModelCache:
    """Trained models keyed by (derived seed, labeled ids); lets methods share cycle 1."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: ExperimentConfig, data: PoolData, seed: int, labeled: list) -> TrainedModel:
        key = (seed, hashlib.sha256(np.asarray(sorted(labeled), dtype=np.int64).tobytes()).hexdigest())
        if key not in self._store:
            self._store[key] = fit_and_evaluate(cfg, data, seed, labeled)
        return self._store[key]


def fit_and_evaluate(cfg: ExperimentConfig, data: PoolData, seed: int, labeled: list) -> TrainedModel:
    init = init_params(cfg.network, seed)
    res = train(init, data.scenes(labeled), cfg.network, cfg.optimizer, seed)
    dets = [detections_as_tuples(d) for d, _, _ in detect(res.params, cfg.network, data.test)]
    gt = scene_ground_truth(data.test)
    m50 = mean_average_precision(dets, gt, cfg.network.n_classes, 0.5)
    m75 = mean_average_precision(dets, gt, cfg.network.n_classes, 0.75)
    return TrainedModel(res.params, res.curve, m50, m75, params_hash(init))


def pool_uncertainties(params: dict, cfg: ExperimentConfig, scenes: list) -> list:
    """Raw (m_i, 4) uncertainty arrays of surviving detections per scene."""
    out = []
    for dets, gmm, _ in detect(params, cfg.network, scenes):
        dets = detection_uncertainties(gmm, dets, cfg.uncertainty_reduce)
        out.append(np.array([d.uncertainties.as_array() for d in dets]).reshape(-1, 4))
    return out


def select(cfg: ExperimentConfig, data: PoolData, model: TrainedModel, state: ALState, seed: int,
           method: str | None = None, mode: acq.AggregationMode | None = None):
    """(selected ids, PoolScores or None) for one acquisition step."""
    method = method or cfg.acquisition
    mode = mode or cfg.mode
    pool = state.unlabeled
    B = cfg.budget
    if method == "random":
        return acq.random_score(pool, seed, B), None
    scenes = data.scenes(pool)
    if method == "mdn":
        scores = acq.score_pool(pool, pool_uncertainties(model.params, cfg, scenes), mode)
        return acq.select_top_k(scores.ids, scores.final, B, scores.has_detection), scores
    if method == "entropy":
        ent = [acq.entropy_score(d) for d, _, _ in detect(model.params, cfg.network, scenes)]
        return acq.select_top_k(pool, ent, B), None
    if method == "coreset":
        pool_f = np.array([f for _, _, f in detect(model.params, cfg.network, scenes)])
        lab_f = np.array([f for _, _, f in detect(model.params, cfg.network, data.scenes(state.labeled))])
        picks = acq.coreset_greedy(pool_f, lab_f, B)
        return sorted(pool[i] for i in picks), None
    raise ValueError(f"unknown acquisition {method!r}")


def run_cycle(state: ALState, cfg: ExperimentConfig, data: PoolData, cache: ModelCache | None = None,
              method: str | None = None, mode: acq.AggregationMode | None = None,
              run_dir: Path | None = None) -> ALState:
    """Train from scratch on the labeled set, evaluate, then move the selected batch over."""
    t0 = time.perf_counter()
    cycle = state.cycle + 1
    seed = cycle_seed(state.master_seed, cycle)
    new = dataclasses.replace(state, labeled=list(state.labeled), unlabeled=list(state.unlabeled),
                              records=list(state.records), cycle=cycle)
    try:
        model = (cache or ModelCache()).get(cfg, data, seed, new.labeled)
    except TrainingDiverged as exc:
        new.aborted = f"cycle {cycle}: {exc}"
        return new
    selection, scores = [], None
    if len(new.unlabeled) >= cfg.budget:
        selection, scores = select(cfg, data, model, new, seed, method, mode)
    else:
        new.exhausted = True
    rec = CycleRecord(cycle, len(new.labeled), model.map50, model.map75, list(selection), model.init_hash,
                      float(model.curve[-1][1]) if model.curve else float("nan"))
    chosen = set(selection)
    new.labeled = sorted(new.labeled + list(selection))
    new.unlabeled = [i for i in new.unlabeled if i not in chosen]
    rec.wall_sec = time.perf_counter() - t0
    new.records.append(rec)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_params(run_dir / f"cycle{cycle}.ckpt", model.params)
        write_loss_curve(run_dir / f"loss_cycle{cycle}.csv", model.curve)
        if scores is not None:
            scores.write_csv(run_dir / f"scores_cycle{cycle}.csv", selection)
    log.info("seed %d cycle %d: %d labeled, mAP50 %.4f mAP75 %.4f", state.master_seed, cycle,
             rec.labeled_count, rec.map50, rec.map75)
    return new


def run_trial(cfg: ExperimentConfig, data: PoolData, master_seed: int, cache: ModelCache | None = None,
              method: str | None = None, mode=None, run_dir: Path | None = None) -> ALState:
    state = initial_state(cfg, data, master_seed)
    for _ in range(cfg.cycles):
        state = run_cycle(state, cfg, data, cache, method, mode, run_dir)
        if state.aborted or state.exhausted:
            break
    return state


# ---------------------------------------------------------------- experiments and reports

METRICS_HEADER = ("seed", "cycle", "labeled_count", "mAP50", "mAP75")
SUMMARY_HEADER = ("cycle", "labeled_count", "n_seeds", "mAP50_mean", "mAP50_std", "mAP75_mean", "mAP75_std")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _f(x: float) -> str:
    return repr(float(x))


def summarize(states: dict) -> list:
    """Mean/std (population) per cycle over seeds."""
    by_cycle = {}
    for st in states.values():
        for r in st.records:
            by_cycle.setdefault(r.cycle, []).append(r)
    rows = []
    for c in sorted(by_cycle):
        rs = by_cycle[c]
        m50 = np.array([r.map50 for r in rs])
        m75 = np.array([r.map75 for r in rs])
        rows.append((c, rs[0].labeled_count, len(rs), float(m50.mean()), float(m50.std()),
                     float(m75.mean()), float(m75.std())))
    return rows


@dataclass
class ExperimentReport:
    states: dict  # seed -> ALState
    summary: list
    complete: bool

    def final_map(self, seed: int, key: str = "map50") -> float:
        return getattr(self.states[seed].records[-1], key)


def run_experiment(cfg: ExperimentConfig, out_dir=None, data: PoolData | None = None,
                   cache: ModelCache | None = None, method: str | None = None, mode=None) -> ExperimentReport:
    """All seeds of one acquisition method; persists metrics, selections and per-seed state."""
    data = data or PoolData.build(cfg)
    cache = cache or ModelCache()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.ini")
    states = {}
    for s in cfg.seeds:
        sub = out / f"seed{s}" if out is not None else None
        states[s] = run_trial(cfg, data, s, cache, method, mode, sub)
        if sub is not None:
            (sub / "state.json").write_text(states[s].to_json() + "\n", encoding="utf-8")
    complete = all(not st.aborted and len(st.records) == cfg.cycles for st in states.values())
    report = ExperimentReport(states, summarize(states), complete)
    if out is not None:
        write_experiment_outputs(report, out)
    return report


def write_experiment_outputs(report: ExperimentReport, out: Path) -> None:
    metrics, selections, timing = [], [], []
    for s, st in report.states.items():
        for r in st.records:
            metrics.append((s, r.cycle, r.labeled_count, _f(r.map50), _f(r.map75)))
            timing.append((s, r.cycle, f"{r.wall_sec:.3f}"))
            selections.extend((s, r.cycle, i) for i in r.selection)
    _write_rows(out / "metrics.csv", METRICS_HEADER, metrics)
    _write_rows(out / "selections.csv", ("seed", "cycle", "image_id"), selections)
    _write_rows(out / "timing.csv", ("seed", "cycle", "wall_sec"), timing)
    _write_rows(out / "summary.csv", SUMMARY_HEADER + ("complete",),
                [tuple(r[:3]) + tuple(_f(x) for x in r[3:]) + (int(report.complete),) for r in report.summary])


AGG_HEADER = ("mode", "cycle", "labeled_count", "n_seeds", "mAP50_mean", "mAP50_std", "mAP75_mean", "mAP75_std")


def compare_aggregations(cfg: ExperimentConfig, out_dir=None, modes=None, include_random: bool = True,
                         data: PoolData | None = None, cache: ModelCache | None = None) -> dict:
    """One AL run per aggregation mode (plus random) over shared initial sets; returns mode -> report."""
    data = data or PoolData.build(cfg)
    cache = cache or ModelCache()
    modes = list(acq.AggregationMode) if modes is None else [acq.AggregationMode.parse(m) if isinstance(m, str)
                                                             else m for m in modes]
    reports = {}
    for m in modes:
        reports[m.label] = run_experiment(cfg, None, data, cache, "mdn", m)
    if include_random:
        reports["random"] = run_experiment(cfg, None, data, cache, "random")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.ini")
        rows = []
        for c in range(1, cfg.cycles + 1):
            for label, rep in reports.items():
                for r in rep.summary:
                    if r[0] == c:
                        rows.append((label,) + tuple(r[:3]) + tuple(_f(x) for x in r[3:]))
        _write_rows(out / "agg_table.csv", AGG_HEADER, rows)
    return reports


def overlap_analysis(cfg: ExperimentConfig, out_dir=None, data: PoolData | None = None,
                     cache: ModelCache | None = None):
    """4x4 overlap (%) of single-type selections from the cycle-1 model, averaged over seeds."""
    data = data or PoolData.build(cfg)
    cache = cache or ModelCache()
    mats = []
    for s in cfg.seeds:
        state = initial_state(cfg, data, s)
        seed = cycle_seed(s, 1)
        model = cache.get(cfg, data, seed, state.labeled)
        quads = pool_uncertainties(model.params, cfg, data.scenes(state.unlabeled))
        sels = {}
        for t, m in zip(TYPES, (acq.AggregationMode.AL_B, acq.AggregationMode.EP_B,
                                acq.AggregationMode.AL_C, acq.AggregationMode.EP_C)):
            sc = acq.score_pool(state.unlabeled, quads, m)
            sels[t] = acq.select_top_k(sc.ids, sc.final, cfg.budget, sc.has_detection)
        mats.append(acq.overlap_matrix(sels)[1])
    mean = np.mean(mats, axis=0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "overlap.csv", ("type",) + TYPES,
                    [(t,) + tuple(_f(v) for v in row) for t, row in zip(TYPES, mean)])
    return list(TYPES), mean, mats
