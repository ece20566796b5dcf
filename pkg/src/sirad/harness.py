"""Training, evaluation, protocol runs, loop ablation and gradient checks.

Random streams: the config seed roots one ``SeedSequence`` whose four
children drive, in order, protocol sample selection, teacher init, student
init and batch sampling.  Batches are drawn uniformly with replacement from
the training pool.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, write_config
from .data import ConfigError, ProtocolRun, build_protocol, load_manifests, load_record
from .nn import TINY_WIDTHS, SirModel, loop_forward, reconstruction_loss, teacher_forward, training_loss
from .optim import Adam
from .persist import apply_checkpoint, load_checkpoint, save_checkpoint
from .scoring import AnomalyResult, anomaly_maps, auroc
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

REPORT_FORMAT = "sirad-report/1"


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("selection", "teacher", "student", "batches")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def build_model(cfg: Config, streams=None) -> SirModel:
    streams = streams or seed_streams(cfg.seed)
    model = SirModel.create(
        in_channels=cfg.channels,
        widths=cfg.widths,
        loops=cfg.loops,
        eps=cfg.epsilon_cos,
        slope=cfg.leaky_slope,
        teacher_rng=np.random.default_rng(streams["teacher"]),
        student_rng=np.random.default_rng(streams["student"]),
    )
    if cfg.teacher_checkpoint:
        ckpt = load_checkpoint(cfg.teacher_checkpoint)
        teacher_only = {k: v for k, v in ckpt.tensors.items() if k.startswith("teacher.")}
        ckpt.tensors = teacher_only
        apply_checkpoint(ckpt, model)
    return model


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    model: SirModel
    optimizer: Adam
    batch_rng: np.random.Generator
    iteration: int = 0
    losses: list[float] = field(default_factory=list)


class Trainer:
    """Student training on a fixed pool of images.

    Teacher features of the pool are computed once; the teacher is frozen
    so they never change.  Each step evaluates the distinct images of the
    sampled batch, weighted by how often each was drawn, which gives the
    same loss and gradient as the full batch with repeats.
    """

    def __init__(self, cfg: Config, state: TrainState, pool: list[Tensor]):
        if not pool:
            raise ConfigError("empty training set")
        self.cfg = cfg
        self.state = state
        self.features = [teacher_forward(state.model, x) for x in pool]

    def step(self) -> float:
        st, cfg = self.state, self.cfg
        idx = st.batch_rng.integers(len(self.features), size=cfg.batch_size)
        uniq, counts = np.unique(idx, return_counts=True)
        f3_t = Tensor(np.concatenate([self.features[i][0].data for i in uniq]))
        phi_t = Tensor(np.concatenate([self.features[i][1].data for i in uniq]))
        params = st.model.student_parameters()
        with Tape() as tape:
            outputs = loop_forward(st.model, phi_t)
            loss = reconstruction_loss(outputs, f3_t, phi_t, st.model.eps, weights=counts / cfg.batch_size)
        grads = tape.backward(loss, params.values())
        st.optimizer.step({name: grads[p] for name, p in params.items()})
        st.iteration += 1
        value = loss.item()
        st.losses.append(value)
        return value

    def run(self, until: int | None = None) -> list[float]:
        until = self.cfg.iterations if until is None else until
        while self.state.iteration < until:
            loss = self.step()
            if self.state.iteration % max(1, self.cfg.iterations // 10) == 0:
                log.info("iteration %d/%d loss %.6f", self.state.iteration, self.cfg.iterations, loss)
        return self.state.losses


def new_state(cfg: Config, streams=None) -> TrainState:
    streams = streams or seed_streams(cfg.seed)
    model = build_model(cfg, streams)
    opt = Adam(model.student_parameters(), lr=cfg.learning_rate)
    return TrainState(model, opt, np.random.default_rng(streams["batches"]))


def checkpoint_meta(cfg: Config, state: TrainState, extra: dict | None = None) -> dict:
    meta = {
        "config": cfg.to_document(),
        "seed": cfg.seed,
        "iteration": state.iteration,
        "rng_state": state.batch_rng.bit_generator.state,
        "losses": state.losses,
    }
    meta["config"].pop("output_dir", None)
    if extra:
        meta.update(extra)
    return meta


def save_state(path, cfg: Config, state: TrainState, extra: dict | None = None) -> None:
    save_checkpoint(path, state.model, state.optimizer, checkpoint_meta(cfg, state, extra))


def load_state(path, cfg: Config | None = None) -> tuple[Config, TrainState]:
    """Rebuild model, optimizer and batch stream exactly where a checkpoint left off."""
    ckpt = load_checkpoint(path)
    if cfg is None:
        doc = dict(ckpt.meta.get("config", {}))
        cfg = Config.from_document(doc)
    state = new_state(cfg)
    apply_checkpoint(ckpt, state.model, state.optimizer)
    if "rng_state" in ckpt.meta:
        state.batch_rng.bit_generator.state = ckpt.meta["rng_state"]
    state.iteration = int(ckpt.meta.get("iteration", 0))
    state.losses = [float(v) for v in ckpt.meta.get("losses", [])]
    return cfg, state


# ----------------------------------------------------------------------------
# evaluation


ROW_LABELS = {"f3": "f3", "phi": "phi", "fused": "Fused"}


def metric_keys(loops: int) -> list[tuple[str, str]]:
    """(key, label) for the 3L + 1 rows of the fusion table."""
    rows = []
    for k in range(1, loops + 1):
        for kind in ("f3", "phi", "fused"):
            rows.append((f"loop{k}_{kind}", f"Loop {k} {ROW_LABELS[kind]}"))
    rows.append(("final_fused", "Final Fused Sum"))
    return rows


@dataclass
class DomainEval:
    domain: str
    sources: list[str]
    labels: list[str]
    scores: dict[str, list[float]]

    def aurocs(self) -> dict[str, float]:
        return {k: auroc(v, self.labels) for k, v in self.scores.items()}


def score_image(model: SirModel, cfg: Config, path, domain: str, label: str) -> AnomalyResult:
    rec = load_record(path, domain, label, cfg.image_size, cfg.channels)
    return anomaly_maps(model, rec.image, sigma=cfg.sigma_smooth)


def evaluate(model: SirModel, cfg: Config, run: ProtocolRun, roots: dict[str, Path]) -> list[DomainEval]:
    """Score every test image in dataset order."""
    out = []
    for domain, items in run.tests.items():
        ev = DomainEval(domain, [], [], {k: [] for k, _ in metric_keys(model.loops)})
        for path, label in items:
            res = score_image(model, cfg, path, domain, label)
            for k, v in res.scores().items():
                ev.scores[k].append(v)
            ev.sources.append(Path(path).relative_to(roots[domain]).as_posix())
            ev.labels.append(label)
        out.append(ev)
    return out


def fusion_table(evals: list[DomainEval], loops: int) -> list[dict]:
    per_domain = {ev.domain: ev.aurocs() for ev in evals}
    rows = []
    for key, label in metric_keys(loops):
        values = {d: per_domain[d][key] for d in per_domain}
        rows.append({"key": key, "metric": label, "values": values, "average": float(np.mean(list(values.values())))})
    return rows


def format_table(columns: list[str], rows: list[tuple[str, list[float]]], first: str) -> str:
    """Plain-text table in percent, one row per entry plus an Average column."""
    head = [first, *columns, "Average"]
    body = []
    for label, vals in rows:
        body.append([label, *[f"{100 * v:.2f}" for v in vals], f"{100 * float(np.mean(vals)):.2f}"])
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(head))
    return "\n".join([fmt(head), rule, *map(fmt, body)]) + "\n"


@dataclass
class RunReport:
    doc: dict
    wall_clock: float = 0.0

    @property
    def auroc(self) -> dict[str, float]:
        return self.doc["auroc"]

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    def table_text(self) -> str:
        domains = self.doc["domains"]
        rows = [(r["metric"], [r["values"][d] for d in domains]) for r in self.doc["fusion_table"]]
        return format_table(domains, rows, "Metric")

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tmp = directory / "report.json.partial"
        tmp.write_text(self.dumps())
        (directory / "table.txt").write_text(self.table_text())
        (directory / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}) + "\n")
        tmp.replace(directory / "report.json")


def make_report(cfg: Config, run: ProtocolRun, state: TrainState, evals: list[DomainEval], roots) -> RunReport:
    table = fusion_table(evals, cfg.loops)
    final = {r_d: v for r_d, v in table[-1]["values"].items()}
    cfg_doc = cfg.to_document()
    cfg_doc.pop("output_dir", None)
    every = cfg.loss_log_every
    samples = [[i + 1, v] for i, v in enumerate(state.losses) if (i + 1) % every == 0 or i == 0]
    doc = {
        "format": REPORT_FORMAT,
        "run": run.name,
        "protocol": cfg.protocol,
        "seed": cfg.seed,
        "config": cfg_doc,
        "iterations": state.iteration,
        "train_set": [{"domain": d, "path": Path(p).relative_to(roots[d]).as_posix()} for d, p in run.train],
        "domains": [ev.domain for ev in evals],
        "auroc": final,
        "average_auroc": float(np.mean(list(final.values()))),
        "fusion_table": table,
        "loss_trajectory": samples,
        "final_loss": state.losses[-1] if state.losses else None,
        "scores": {
            ev.domain: [
                {"source": s, "label": l, "score": ev.scores["final_fused"][i]}
                for i, (s, l) in enumerate(zip(ev.sources, ev.labels))
            ]
            for ev in evals
        },
    }
    return RunReport(doc)


# ----------------------------------------------------------------------------
# protocol orchestration


def _prepare(cfg: Config):
    if not cfg.manifests:
        raise ConfigError("no manifests configured")
    manifests = load_manifests(cfg.manifests)
    streams = seed_streams(cfg.seed)
    selection_seed = int(streams["selection"].generate_state(1)[0])
    runs = build_protocol(manifests, cfg.protocol_spec(selection_seed))
    roots = {m.domain: m.root for m in manifests}
    return runs, roots, streams


def train_run(cfg: Config, run: ProtocolRun, streams) -> TrainState:
    state = new_state(cfg, streams)
    pool = [load_record(p, d, "normal", cfg.image_size, cfg.channels).image for d, p in run.train]
    Trainer(cfg, state, pool).run()
    return state


def run_protocol(cfg: Config, out_dir=None) -> list[RunReport]:
    """Train and evaluate every model the protocol calls for.

    Writes ``<out>/config.json`` and, per run, ``<out>/<run>/report.json``,
    ``table.txt``, ``timing.json`` and ``model.ckpt``.
    """
    cfg.validate()
    out_dir = Path(out_dir or cfg.output_dir)
    runs, roots, streams = _prepare(cfg)
    write_config(cfg, out_dir)
    reports = []
    for run in runs:
        t0 = time.perf_counter()
        state = train_run(cfg, run, streams)
        evals = evaluate(state.model, cfg, run, roots)
        report = make_report(cfg, run, state, evals, roots)
        report.wall_clock = time.perf_counter() - t0
        run_dir = out_dir / run.name
        run_dir.mkdir(parents=True, exist_ok=True)
        save_state(run_dir / "model.ckpt", cfg, state, {"run": run.name})
        report.write(run_dir)
        log.info("run %s: AUROC %s", run.name, report.auroc)
        reports.append(report)
    return reports


def evaluate_checkpoint(ckpt_path, cfg: Config) -> RunReport:
    """Re-score a trained checkpoint on the configured test sets."""
    ckpt = load_checkpoint(ckpt_path)
    _, state = load_state(ckpt_path, cfg)
    runs, roots, _ = _prepare(cfg)
    name = ckpt.meta.get("run")
    run = next((r for r in runs if r.name == name), runs[0])
    evals = evaluate(state.model, cfg, run, roots)
    return make_report(cfg, run, state, evals, roots)


def combined_auroc(reports: list[RunReport]) -> dict[str, float]:
    out = {}
    for r in reports:
        out.update(r.auroc)
    return out


@dataclass
class AblationTable:
    domains: list[str]
    rows: list[dict]  # {"loops": L, "values": {domain: auroc}, "average": float}

    def to_document(self) -> dict:
        return {"format": "sirad-ablation/1", "domains": self.domains, "rows": self.rows}

    def text(self) -> str:
        rows = [(str(r["loops"]), [r["values"][d] for d in self.domains]) for r in self.rows]
        return format_table(self.domains, rows, "L")


def loop_ablation(cfg: Config, loop_values, out_dir=None) -> AblationTable:
    """One independent seeded run per loop count; per-domain final AUROC plus the row mean."""
    loop_values = list(loop_values)
    if not loop_values:
        raise ConfigError("loop ablation needs at least one loop count")
    out_dir = Path(out_dir or cfg.output_dir)
    rows, domains = [], None
    for L in loop_values:
        sub = cfg.with_overrides(loops=int(L))
        values = combined_auroc(run_protocol(sub, out_dir / f"L{L}"))
        domains = domains or list(values)
        rows.append({"loops": int(L), "values": values, "average": float(np.mean([values[d] for d in domains]))})
    table = AblationTable(domains, rows)
    write_config(cfg, out_dir)
    (out_dir / "ablation.json").write_text(json.dumps(table.to_document(), indent=2, sort_keys=True) + "\n")
    (out_dir / "ablation.txt").write_text(table.text())
    return table


# ----------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    loops: int
    max_rel_error: float
    per_parameter: dict[str, float]
    teacher_grad_max: dict[str, float]
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol and all(v == 0.0 for v in self.teacher_grad_max.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor): relative where gradients are non-negligible, absolute below ``floor``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    loops: int = 3,
    seed: int = 0,
    image_size: int = 32,
    channels: int = 2,
    widths=TINY_WIDTHS,
    batch: int = 2,
    step: float = 1e-5,
    slope: float = 0.1,
) -> GradCheckReport:
    """Central finite differences of the training loss vs the tape's gradients.

    Every element of every student parameter is perturbed.  Teacher
    parameters are included as leaves and must come back with exactly zero
    gradient.
    """
    streams = seed_streams(seed)
    model = SirModel.create(
        channels,
        widths,
        loops=loops,
        slope=slope,
        teacher_rng=np.random.default_rng(streams["teacher"]),
        student_rng=np.random.default_rng(streams["student"]),
    )
    rng = np.random.default_rng(streams["batches"])
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch, channels, image_size, image_size)))
    teacher = {f"teacher.{k}": v for k, v in model.teacher.params.items()}
    student = model.student_parameters()
    with Tape() as tape:
        loss = training_loss(model, x)
    grads = tape.backward(loss, [*student.values(), *teacher.values()])

    per_param, worst, checked = {}, 0.0, 0
    for name, p in student.items():
        base = p.data.copy()
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            probe = flat.copy()
            probe[i] = flat[i] + step
            p.assign(probe.reshape(base.shape))
            up = training_loss(model, x).item()
            probe[i] = flat[i] - step
            p.assign(probe.reshape(base.shape))
            down = training_loss(model, x).item()
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        p.assign(base)
        err = float(relative_error(grads[p], numeric).max())
        per_param[name] = err
        worst = max(worst, err)
        checked += flat.size
    teacher_max = {name: float(np.abs(grads[t]).max()) for name, t in teacher.items()}
    return GradCheckReport(loops, worst, per_param, teacher_max, checked)
