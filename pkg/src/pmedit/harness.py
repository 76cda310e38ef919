"""Experiment harness: synthetic facts, edit metrics, and run drivers.

A *fact* is a random input x with a captured pre-edit output t_old and a
target output t_new (the output of a different random input, so targets stay
on the model's output manifold).  Editing a fact means making the model map
x near t_new; metrics then ask three questions:

* es — did the edited model move x's output closer to t_new than t_old?
* ps — does the same hold for perturbed (paraphrase) inputs?
* ns — do unedited facts with nearby keys still prefer their own t_old?

All comparisons are strict (ties fail) and s is the harmonic mean of the
three on the percentage scale.

Drivers: run_singular edits facts one at a time on a fresh base model,
run_batched folds all edits into one update, run_sequential_batched applies
batches cumulatively, re-evaluating every fact edited so far after each
batch.  Keys and values for a batch are always computed against the current
(pre-batch) model; the preservation basis stays fixed at the base model
unless augment_preservation is set.

Worker threads: set PM_EDIT_THREADS to parallelize per-fact work inside a
batch.  Reduction order is input order, so results are bitwise identical
for any thread count.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import partial

import numpy as np

from .editors import (
    EditBatchMatrices,
    EditDelta,
    ObjectiveBreakdown,
    emmet_delta,
    memit_delta,
    pm_objective,
    rome_delta,
)
from .errors import (
    DimensionMismatch,
    InvalidConfig,
    SchemaMismatch,
    SingularGram,
    UnknownFactId,
)
from .model import (
    PreservationBasis,
    ToyModel,
    ToyModelConfig,
    estimate_preservation,
    forward,
    init_model,
)
from .numerics import frobenius
from .value_solver import ValueSolveOptions, solve_value

_ALGORITHMS = ("rome", "memit", "emmet")
_STRATEGIES = ("singular", "batched", "sequential_batched")

# Minimum required separation between a fact's old and new target outputs.
_MIN_TARGET_DIST = 1e-6


def thread_count() -> int:
    """Worker cap from PM_EDIT_THREADS (default 1). Never changes results."""
    raw = os.environ.get("PM_EDIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"PM_EDIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _ordered_map(fn, items):
    """Map preserving input order; parallel only when PM_EDIT_THREADS > 1."""
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SyntheticFact:
    id: int
    x: np.ndarray
    paraphrases: tuple[np.ndarray, ...]
    t_old: np.ndarray  # pre-edit output at x, captured at generation
    t_new: np.ndarray  # edit target output
    neighbor_ids: tuple[int, ...]  # facts with the most similar layer keys


@dataclass(frozen=True)
class MetricsReport:
    es: float
    ps: float
    ns: float
    s: float  # harmonic composite on the 0..100 scale
    edits_so_far: int
    batch_index: int = 0
    objective: ObjectiveBreakdown | None = None
    delta_fro: float = 0.0


@dataclass(frozen=True)
class ExperimentPlan:
    """Full description of one experiment; JSON configs mirror these fields.

    lam is the algorithm's regularization knob: the preservation weight for
    memit, the Gram ridge for emmet (the chosen default is 0), unused by
    rome.  A lam of None picks the per-algorithm default (memit 1.0, else 0).
    """

    algorithm: str
    layer: int
    strategy: str
    batch_size: int
    total_edits: int
    seed: int
    lam: float | None = None
    model_config: ToyModelConfig = field(default_factory=ToyModelConfig)
    eval_every_batch: bool = True
    num_facts: int | None = None  # fact pool size; None -> max(512, total_edits)
    n_paraphrases: int = 3
    para_noise: float = 0.05
    neighbor_k: int = 5
    preservation_samples: int = 256
    ridge_eps: float = 1e-6
    augment_preservation: bool = False
    value_opts: ValueSolveOptions = field(default_factory=ValueSolveOptions)

    def __post_init__(self):
        if self.algorithm not in _ALGORITHMS:
            raise InvalidConfig(f"algorithm must be one of {_ALGORITHMS}")
        if self.strategy not in _STRATEGIES:
            raise InvalidConfig(f"strategy must be one of {_STRATEGIES}")
        if self.batch_size < 1 or self.total_edits < 1:
            raise InvalidConfig("batch_size and total_edits must be >= 1")
        if self.total_edits % self.batch_size != 0:
            raise InvalidConfig(
                f"total_edits ({self.total_edits}) must be a multiple of "
                f"batch_size ({self.batch_size})"
            )
        if self.strategy == "singular" and self.batch_size != 1:
            raise InvalidConfig("singular strategy requires batch_size == 1")
        if self.algorithm == "rome" and self.batch_size != 1:
            raise InvalidConfig("rome edits one fact at a time (batch_size == 1)")
        if self.strategy == "batched":
            if self.algorithm not in ("memit", "emmet"):
                raise InvalidConfig("batched strategy requires memit or emmet")
            if self.batch_size != self.total_edits:
                raise InvalidConfig(
                    "batched strategy folds every edit into one batch "
                    "(batch_size == total_edits)"
                )
        if not 0 <= self.layer < self.model_config.num_layers:
            raise InvalidConfig(
                f"layer {self.layer} out of range for "
                f"{self.model_config.num_layers}-layer model"
            )
        if self.seed < 0:
            raise InvalidConfig(f"seed must be non-negative, got {self.seed}")
        if self.lam is None:
            object.__setattr__(self, "lam", 1.0 if self.algorithm == "memit" else 0.0)
        if self.lam < 0.0 or not np.isfinite(self.lam):
            raise InvalidConfig(f"lambda must be finite and >= 0, got {self.lam}")
        if self.num_facts is None:
            object.__setattr__(self, "num_facts", max(512, self.total_edits))
        if self.num_facts < self.total_edits:
            raise InvalidConfig(
                f"num_facts ({self.num_facts}) must cover total_edits "
                f"({self.total_edits})"
            )
        if self.n_paraphrases < 1:
            raise InvalidConfig("n_paraphrases must be >= 1")
        if not self.para_noise > 0.0:
            raise InvalidConfig("para_noise must be positive")
        if self.neighbor_k < 0:
            raise InvalidConfig("neighbor_k must be >= 0")

    @property
    def num_batches(self) -> int:
        return self.total_edits // self.batch_size

    def to_dict(self) -> dict:
        d = {
            "algorithm": self.algorithm,
            "layer": self.layer,
            "strategy": self.strategy,
            "batch_size": self.batch_size,
            "total_edits": self.total_edits,
            "seed": self.seed,
            "lambda": self.lam,
            "model_config": self.model_config.to_dict(),
            "eval_every_batch": self.eval_every_batch,
            "num_facts": self.num_facts,
            "n_paraphrases": self.n_paraphrases,
            "para_noise": self.para_noise,
            "neighbor_k": self.neighbor_k,
            "preservation_samples": self.preservation_samples,
            "ridge_eps": self.ridge_eps,
            "augment_preservation": self.augment_preservation,
            "value_opts": {
                "max_iters": self.value_opts.max_iters,
                "step_size": self.value_opts.step_size,
                "decay": self.value_opts.decay,
                "grad_tol": self.value_opts.grad_tol,
                "target_tol": self.value_opts.target_tol,
            },
        }
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        """Build a plan from a JSON config; unknown keys are errors."""
        if not isinstance(doc, dict):
            raise InvalidConfig("plan config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"lam"} | {"lambda"}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown plan fields: {sorted(unknown)}")
        missing = {"algorithm", "layer", "strategy", "batch_size", "total_edits", "seed"} - set(doc)
        if missing:
            raise InvalidConfig(f"plan config missing required fields: {sorted(missing)}")
        kwargs = dict(doc)
        if "lambda" in kwargs:
            kwargs["lam"] = kwargs.pop("lambda")
        try:
            if "model_config" in kwargs:
                kwargs["model_config"] = ToyModelConfig(**kwargs["model_config"])
            if "value_opts" in kwargs:
                kwargs["value_opts"] = ValueSolveOptions(**kwargs["value_opts"])
        except TypeError as exc:
            raise InvalidConfig(f"malformed nested config: {exc}") from None
        return cls(**kwargs)


def gen_facts(
    model: ToyModel,
    layer: int,
    count: int,
    n_paraphrases: int = 3,
    para_noise: float = 0.05,
    neighbor_k: int = 5,
    seed=0,
) -> list[SyntheticFact]:
    """Draw a deterministic synthetic fact set against the given model.

    Draw order is layer-independent (x, paraphrase noise, then the target
    input, redrawn until the target output clears _MIN_TARGET_DIST), so two
    sweeps over layers with one seed share identical fact vectors and differ
    only in neighbor lists.
    """
    model._check_layer(layer)
    if count < 1:
        raise InvalidConfig(f"count must be >= 1, got {count}")
    if n_paraphrases < 1:
        raise InvalidConfig("n_paraphrases must be >= 1 (ps needs paraphrases)")
    if not para_noise > 0.0:
        raise InvalidConfig("para_noise must be positive (zero defeats ps)")
    if neighbor_k < 0:
        raise InvalidConfig("neighbor_k must be >= 0")
    d_model = model.config.d_model
    rng = np.random.default_rng(seed)

    records = []
    for fact_id in range(count):
        x = rng.standard_normal(d_model)
        paras = tuple(
            x + para_noise * rng.standard_normal(d_model) for _ in range(n_paraphrases)
        )
        trace = forward(model, x)
        t_old = trace.output
        while True:
            x_target = rng.standard_normal(d_model)
            t_new = forward(model, x_target).output
            if float(np.linalg.norm(t_new - t_old)) > _MIN_TARGET_DIST:
                break
        records.append((fact_id, x, paras, t_old, t_new, trace.keys[layer]))

    keys = np.stack([rec[5] for rec in records], axis=1)
    norms = np.linalg.norm(keys, axis=0)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = keys / safe
    cos = unit.T @ unit
    k_eff = min(neighbor_k, count - 1)

    facts = []
    for fact_id, x, paras, t_old, t_new, _key in records:
        sims = cos[fact_id].copy()
        sims[fact_id] = -np.inf
        order = np.argsort(-sims, kind="stable")
        neighbors = tuple(int(j) for j in order[:k_eff])
        facts.append(
            SyntheticFact(
                id=fact_id,
                x=x,
                paraphrases=paras,
                t_old=t_old,
                t_new=t_new,
                neighbor_ids=neighbors,
            )
        )
    return facts


def composite_score(es: float, ps: float, ns: float) -> float:
    """Harmonic mean of the three fractions on the 0..100 scale (0 if any is 0)."""
    comps = (100.0 * es, 100.0 * ps, 100.0 * ns)
    if min(comps) <= 0.0:
        return 0.0
    return 3.0 / sum(1.0 / c for c in comps)


def eval_metrics(
    edited: ToyModel,
    facts: list[SyntheticFact],
    edited_ids,
    layer: int,
) -> MetricsReport:
    """Score an edited model over the facts edited so far.

    ns pairs every edited fact with its unedited neighbors; with no such
    pairs ns is 0 (and so is s), which a run with a reasonable fact pool
    never hits.
    """
    edited._check_layer(layer)
    by_id = {f.id: f for f in facts}
    edited_ids = list(edited_ids)
    for fid in edited_ids:
        if fid not in by_id:
            raise UnknownFactId(f"fact id {fid} not in the fact set")
    edited_set = set(edited_ids)

    pairs = []  # (neighbor_id, edited_id) with the neighbor unedited
    for fid in edited_ids:
        for nid in by_id[fid].neighbor_ids:
            if nid not in edited_set:
                pairs.append((nid, fid))

    need_outputs = list(edited_ids) + sorted({nid for nid, _ in pairs})

    def output_at(fid: int) -> np.ndarray:
        return forward(edited, by_id[fid].x).output

    outs = dict(zip(need_outputs, _ordered_map(output_at, need_outputs)))

    def para_outputs(fid: int) -> list[np.ndarray]:
        return [forward(edited, p).output for p in by_id[fid].paraphrases]

    paras = dict(zip(edited_ids, _ordered_map(para_outputs, edited_ids)))

    def prefers_new(y: np.ndarray, fact: SyntheticFact) -> bool:
        return float(np.linalg.norm(y - fact.t_new)) < float(
            np.linalg.norm(y - fact.t_old)
        )

    es_hits = sum(1 for fid in edited_ids if prefers_new(outs[fid], by_id[fid]))
    es = es_hits / len(edited_ids) if edited_ids else 0.0

    ps_total = ps_hits = 0
    for fid in edited_ids:
        for y in paras[fid]:
            ps_total += 1
            ps_hits += prefers_new(y, by_id[fid])
    ps = ps_hits / ps_total if ps_total else 0.0

    ns_hits = 0
    for nid, eid in pairs:
        y = outs[nid]
        d_own_old = float(np.linalg.norm(y - by_id[nid].t_old))
        d_edit_new = float(np.linalg.norm(y - by_id[eid].t_new))
        ns_hits += d_own_old < d_edit_new
    ns = ns_hits / len(pairs) if pairs else 0.0

    return MetricsReport(
        es=es, ps=ps, ns=ns, s=composite_score(es, ps, ns), edits_so_far=len(edited_ids)
    )


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Mean the components over reports; s is the composite of the means."""
    if not reports:
        raise InvalidConfig("cannot aggregate zero reports")
    es = float(np.mean([r.es for r in reports]))
    ps = float(np.mean([r.ps for r in reports]))
    ns = float(np.mean([r.ns for r in reports]))
    return MetricsReport(
        es=es,
        ps=ps,
        ns=ns,
        s=composite_score(es, ps, ns),
        edits_so_far=len(reports),
        batch_index=0,
        objective=None,
        delta_fro=float(np.mean([r.delta_fro for r in reports])),
    )


def apply_edit(model: ToyModel, layer: int, delta: EditDelta) -> ToyModel:
    """Return a new model with W_layer += delta; other layers shared."""
    model._check_layer(layer)
    w0 = model.down_projs[layer]
    if delta.delta.shape != w0.shape:
        raise DimensionMismatch(
            f"delta shape {delta.delta.shape} does not match W_{layer} {w0.shape}"
        )
    return model.with_down_proj(layer, w0 + delta.delta)


def _fact_edit_pair(
    model: ToyModel, layer: int, opts: ValueSolveOptions, fact: SyntheticFact
) -> tuple[np.ndarray, np.ndarray]:
    """Edit key and solved target value for one fact against one model."""
    k = forward(model, fact.x).keys[layer]
    result = solve_value(model, layer, fact.x, fact.t_new, opts)
    return k, result.v_e


def _compute_delta(
    algorithm: str, w0: np.ndarray, c0: np.ndarray, batch: EditBatchMatrices, lam: float
) -> EditDelta:
    if algorithm == "rome":
        return rome_delta(w0, c0, batch.K_E[:, 0], batch.V_E[:, 0])
    if algorithm == "memit":
        return memit_delta(w0, c0, batch, lam)
    return emmet_delta(w0, c0, batch, ridge=lam)


def _plan_facts(plan: ExperimentPlan, model: ToyModel) -> list[SyntheticFact]:
    return gen_facts(
        model,
        plan.layer,
        plan.num_facts,
        n_paraphrases=plan.n_paraphrases,
        para_noise=plan.para_noise,
        neighbor_k=plan.neighbor_k,
        seed=np.random.SeedSequence([plan.seed, 0]),
    )


def _plan_basis(plan: ExperimentPlan, model: ToyModel) -> PreservationBasis:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # small pools are fine in tests
        return estimate_preservation(
            model,
            plan.layer,
            plan.preservation_samples,
            ridge_eps=plan.ridge_eps,
            seed=np.random.SeedSequence([plan.seed, 1]),
        )


def _run_batches(plan: ExperimentPlan) -> list[MetricsReport]:
    """Shared core of run_batched and run_sequential_batched."""
    if plan.algorithm == "emmet" and plan.batch_size > plan.model_config.d_ffn:
        raise SingularGram(
            f"emmet batch_size {plan.batch_size} exceeds d_ffn "
            f"{plan.model_config.d_ffn}; the Gram matrix cannot have full rank"
        )
    base = init_model(plan.model_config)
    facts = _plan_facts(plan, base)
    basis = _plan_basis(plan, base)
    k0, c0 = basis.K0, basis.C0

    model = base
    edited_ids: list[int] = []
    reports: list[MetricsReport] = []
    for t in range(plan.num_batches):
        chunk = facts[t * plan.batch_size : (t + 1) * plan.batch_size]
        pairs = _ordered_map(
            partial(_fact_edit_pair, model, plan.layer, plan.value_opts), chunk
        )
        batch = EditBatchMatrices(
            K_E=np.stack([k for k, _ in pairs], axis=1),
            V_E=np.stack([v for _, v in pairs], axis=1),
            fact_ids=tuple(f.id for f in chunk),
        )
        w0 = model.down_projs[plan.layer]
        delta = _compute_delta(plan.algorithm, w0, c0, batch, plan.lam)
        model = apply_edit(model, plan.layer, delta)
        edited_ids.extend(f.id for f in chunk)
        if plan.augment_preservation:
            k0 = np.concatenate([k0, batch.K_E], axis=1)
            moment = (k0 @ k0.T) / float(k0.shape[1])
            c0 = 0.5 * (moment + moment.T) + basis.ridge_eps * np.eye(k0.shape[0])
        if plan.eval_every_batch or t == plan.num_batches - 1:
            report = eval_metrics(model, facts, edited_ids, plan.layer)
            objective = pm_objective(
                w0, model.down_projs[plan.layer], basis.K0, batch, plan.lam
            )
            reports.append(
                replace(
                    report,
                    batch_index=t,
                    edits_so_far=len(edited_ids),
                    objective=objective,
                    delta_fro=frobenius(delta.delta),
                )
            )
    return reports


def run_batched(plan: ExperimentPlan) -> MetricsReport:
    """One update for all facts at once, applied and evaluated once."""
    if plan.strategy != "batched":
        raise InvalidConfig(f"run_batched requires strategy 'batched', got {plan.strategy!r}")
    return _run_batches(plan)[-1]


def run_sequential_batched(plan: ExperimentPlan) -> list[MetricsReport]:
    """Apply batches cumulatively; evaluate all edits so far after each batch."""
    if plan.strategy != "sequential_batched":
        raise InvalidConfig(
            f"run_sequential_batched requires strategy 'sequential_batched', got {plan.strategy!r}"
        )
    return _run_batches(plan)


def _single_edit(
    base: ToyModel,
    facts: list[SyntheticFact],
    basis: PreservationBasis,
    plan: ExperimentPlan,
    index_fact: tuple[int, SyntheticFact],
) -> MetricsReport:
    index, fact = index_fact
    k, v = _fact_edit_pair(base, plan.layer, plan.value_opts, fact)
    batch = EditBatchMatrices(K_E=k[:, None], V_E=v[:, None], fact_ids=(fact.id,))
    w0 = base.down_projs[plan.layer]
    delta = _compute_delta(plan.algorithm, w0, basis.C0, batch, plan.lam)
    edited = apply_edit(base, plan.layer, delta)
    report = eval_metrics(edited, facts, [fact.id], plan.layer)
    objective = pm_objective(w0, edited.down_projs[plan.layer], basis.K0, batch, plan.lam)
    return replace(
        report,
        batch_index=index,
        edits_so_far=1,
        objective=objective,
        delta_fro=frobenius(delta.delta),
    )


def run_singular(plan: ExperimentPlan) -> list[MetricsReport]:
    """Edit each fact independently on a fresh base model; one report per edit."""
    if plan.strategy != "singular":
        raise InvalidConfig(f"run_singular requires strategy 'singular', got {plan.strategy!r}")
    base = init_model(plan.model_config)
    facts = _plan_facts(plan, base)
    basis = _plan_basis(plan, base)
    targets = list(enumerate(facts[: plan.total_edits]))
    return _ordered_map(partial(_single_edit, base, facts, basis, plan), targets)


def layer_sweep(plan_template: ExperimentPlan, layers) -> dict[int, MetricsReport]:
    """Aggregated singular-run metrics per layer, sharing fact inputs."""
    layers = list(layers)
    depth = plan_template.model_config.num_layers
    for layer in layers:
        if not 0 <= layer < depth:
            raise InvalidConfig(f"layer {layer} out of range for depth {depth}")
    results: dict[int, MetricsReport] = {}
    for layer in layers:
        plan = replace(plan_template, layer=layer)
        results[layer] = aggregate_reports(run_singular(plan))
    return results


def lambda_sweep(plan_template: ExperimentPlan, lambdas) -> dict[float, MetricsReport]:
    """run_batched per lambda on the identical fact set and seed."""
    if plan_template.algorithm not in ("memit", "emmet"):
        raise InvalidConfig("lambda_sweep applies to memit or emmet plans")
    results: dict[float, MetricsReport] = {}
    for lam in lambdas:
        plan = replace(plan_template, lam=float(lam))
        results[float(lam)] = run_batched(plan)
    return results


def save_facts(facts: list[SyntheticFact], path: str, layer: int) -> None:
    """Write a fact set as JSON; atomic replace."""
    doc = {
        "format": "pmedit-facts",
        "version": 1,
        "layer": layer,
        "facts": [
            {
                "id": f.id,
                "x": f.x.tolist(),
                "paraphrases": [p.tolist() for p in f.paraphrases],
                "t_old": f.t_old.tolist(),
                "t_new": f.t_new.tolist(),
                "neighbor_ids": list(f.neighbor_ids),
            }
            for f in facts
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_facts(path: str) -> tuple[list[SyntheticFact], int]:
    """Read a fact set written by save_facts; returns (facts, layer)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != "pmedit-facts":
        raise SchemaMismatch(f"{path}: not a fact-set document")
    try:
        facts = [
            SyntheticFact(
                id=int(rec["id"]),
                x=np.asarray(rec["x"], dtype=np.float64),
                paraphrases=tuple(
                    np.asarray(p, dtype=np.float64) for p in rec["paraphrases"]
                ),
                t_old=np.asarray(rec["t_old"], dtype=np.float64),
                t_new=np.asarray(rec["t_new"], dtype=np.float64),
                neighbor_ids=tuple(int(n) for n in rec["neighbor_ids"]),
            )
            for rec in doc["facts"]
        ]
        layer = int(doc["layer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: malformed fact set ({exc})") from None
    return facts, layer
