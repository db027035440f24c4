"""Transfer-matrix experiments, sweeps and report emission.

Adversarial examples are crafted once per (surrogate, attack) and then scored
on every victim. Crafting only ever touches the surrogate. All randomness
derives from the plan seed: each pair's generator is keyed by the plan seed,
the surrogate name and the pair index, so two attacks on the same surrogate
see identical DI and dropout draws.
"""

import csv
import io
import json
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from bpfa.attacks import AttackConfig, craft, embedding_distance, preset, reference_embeddings
from bpfa.train import embed_all

REPORT_COLUMNS = ("surrogate", "victim", "attack", "mode", "asr", "n_pairs", "threshold", "is_whitebox")
FAR_TARGETS = {"impersonation": 0.001, "dodging": 0.01}


class PlanError(ValueError):
    """A plan references a missing model, threshold or attack."""


def substream(*keys):
    """Stable integer seed material from ints and strings."""
    return [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]


@dataclass
class ExperimentPlan:
    dataset: object
    surrogates: dict  # name -> SegmentedNetwork
    victims: dict  # name -> SegmentedNetwork
    thresholds: dict  # victim name -> {mode: Threshold}
    pairs: list
    attacks: dict  # attack name -> AttackConfig
    mode: str = "impersonation"
    seed: int = 0
    # attack name -> {surrogate name: eta}, overriding the config's eta
    eta_for: dict = field(default_factory=dict)
    output_dir: str = None

    def config_for(self, attack, surrogate):
        cfg = replace(self.attacks[attack], mode=self.mode)
        eta = self.eta_for.get(attack, {}).get(surrogate)
        return cfg if eta is None else replace(cfg, eta=float(eta))

    def pair_seeds(self, surrogate):
        return [substream(self.seed, "craft", surrogate, i) for i in range(len(self.pairs))]

    def validate(self):
        if self.mode not in FAR_TARGETS:
            raise PlanError(f"unknown mode {self.mode!r}")
        if not self.surrogates or not self.victims:
            raise PlanError("plan needs at least one surrogate and one victim")
        for name in self.victims:
            if self.mode not in self.thresholds.get(name, {}):
                raise PlanError(f"victim {name!r} has no calibrated {self.mode} threshold")
        for attack, per in self.eta_for.items():
            if attack not in self.attacks:
                raise PlanError(f"eta override for unknown attack {attack!r}")
            missing = set(self.surrogates) - set(per)
            if missing:
                raise PlanError(f"eta override for {attack!r} lacks surrogates {sorted(missing)}")
        if self.mode == "impersonation" and any(p.attacker_id == p.target_id for p in self.pairs):
            raise PlanError("impersonation plans need negative pairs")
        return self


@dataclass
class EvalRow:
    surrogate: str
    victim: str
    attack: str
    mode: str
    asr: float
    n_pairs: int
    threshold: float
    is_whitebox: bool


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    # (surrogate, attack) -> adversarial images; (surrogate, attack, victim) -> distances
    adversarial: dict = field(default_factory=dict)
    distances: dict = field(default_factory=dict)

    def asr(self, surrogate, victim, attack):
        for r in self.rows:
            if (r.surrogate, r.victim, r.attack) == (surrogate, victim, attack):
                return r.asr
        raise KeyError((surrogate, victim, attack))

    def blackbox_mean(self, attack):
        vals = [r.asr for r in self.rows if r.attack == attack and not r.is_whitebox]
        return float(np.mean(vals)) if vals else float("nan")

    def whitebox(self, attack):
        return [r.asr for r in self.rows if r.attack == attack and r.is_whitebox]


# ---------------------------------------------------------------------------
# success rates


def asr_from_distances(distances, threshold, mode):
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty pair set")
    hits = d < threshold if mode == "impersonation" else d > threshold
    return float(np.mean(hits))


def victim_distances(adv_images, refs, victim):
    return embedding_distance(embed_all(victim, np.asarray(adv_images)), embed_all(victim, np.asarray(refs)))


def asr_impersonation(adv_images, targets, victim, threshold):
    """Fraction of pairs the victim matches to the target: ``D < t``."""
    if len(adv_images) == 0:
        raise ValueError("empty pair set")
    return asr_from_distances(victim_distances(adv_images, targets, victim), threshold, "impersonation")


def asr_dodging(adv_images, sources, victim, threshold):
    """Fraction of pairs the victim no longer matches to the source: ``D > t``."""
    if len(adv_images) == 0:
        raise ValueError("empty pair set")
    return asr_from_distances(victim_distances(adv_images, sources, victim), threshold, "dodging")


def _refs(plan):
    ds = plan.dataset
    idx = [p.target_idx if plan.mode == "impersonation" else p.attacker_idx for p in plan.pairs]
    return ds.images[idx]


# ---------------------------------------------------------------------------
# experiments


def craft_cell(plan, surrogate, attack, callback=None):
    net = plan.surrogates[surrogate]
    cfg = plan.config_for(attack, surrogate)
    ds = plan.dataset
    x_src = ds.images[[p.attacker_idx for p in plan.pairs]]
    ref = reference_embeddings(net, ds, plan.pairs, plan.mode)
    return craft(net, x_src, ref, cfg, seeds=plan.pair_seeds(surrogate), callback=callback)


def evaluate(plan, adversarial, report=None):
    """Score crafted images on every victim; ``adversarial`` maps (surrogate, attack) to images."""
    report = report if report is not None else EvalReport()
    refs = _refs(plan)
    ref_emb = {v: embed_all(net, refs) for v, net in plan.victims.items()}
    for (surrogate, attack), x_adv in adversarial.items():
        report.adversarial[(surrogate, attack)] = x_adv
        for victim, net in plan.victims.items():
            t = plan.thresholds[victim][plan.mode].value
            d = embedding_distance(embed_all(net, x_adv), ref_emb[victim])
            report.distances[(surrogate, attack, victim)] = d
            report.rows.append(
                EvalRow(surrogate, victim, attack, plan.mode, asr_from_distances(d, t, plan.mode),
                        len(d), t, surrogate == victim)
            )
    return report


def run_transfer_matrix(plan):
    plan.validate()
    if not plan.pairs:
        raise PlanError("plan has no pairs")
    adversarial = {}
    for surrogate in plan.surrogates:
        for attack in plan.attacks:
            adversarial[(surrogate, attack)] = craft_cell(plan, surrogate, attack).x_adv
    return evaluate(plan, adversarial)


def sweep_eta(plan, etas, attack):
    """Mean black-box ASR of ``attack`` as the feature step varies; negative steps give APFA.

    Returns rows ``{"eta", "asr_blackbox", "asr_whitebox"}``.
    """
    plan.validate()
    rows = []
    for eta in etas:
        sub = replace(plan, attacks={attack: replace(plan.attacks[attack], eta=float(eta))}, eta_for={})
        rep = run_transfer_matrix(sub)
        wb = rep.whitebox(attack)
        rows.append({
            "eta": float(eta),
            "asr_blackbox": rep.blackbox_mean(attack),
            "asr_whitebox": float(np.mean(wb)) if wb else float("nan"),
        })
    return rows


def sweep_iterations(plan, n_grid, baseline, augmented):
    """Mean black-box ASR against iteration count for two attacks on identical pairs and seeds.

    One run to ``max(n_grid)`` is snapshotted at every grid point; the attack
    has no schedule, so a snapshot at ``n`` equals a run with ``n_max = n``.
    """
    plan.validate()
    n_grid = sorted(set(int(n) for n in n_grid))
    if not n_grid or n_grid[0] < 0:
        raise ValueError("iteration grid must be non-empty and non-negative")
    top = n_grid[-1]
    out = {n: {"n": n} for n in n_grid}
    for attack in (baseline, augmented):
        snaps = {n: {} for n in n_grid}
        for surrogate in plan.surrogates:
            x0 = plan.dataset.images[[p.attacker_idx for p in plan.pairs]]
            if 0 in snaps:
                snaps[0][(surrogate, attack)] = x0.copy()

            def grab(state, surrogate=surrogate):
                if state.t - 1 in snaps:
                    snaps[state.t - 1][(surrogate, attack)] = state.x_adv.copy()

            if top > 0:
                sub = replace(plan, attacks={attack: replace(plan.attacks[attack], n_max=top)})
                craft_cell(sub, surrogate, attack, callback=grab)
        for n in n_grid:
            out[n][attack] = evaluate(plan, snaps[n]).blackbox_mean(attack)
    return [out[n] for n in n_grid]


def tune_eta(net, ds, pairs, threshold, base, grid, mode="impersonation", seed=0):
    """Largest feature step in ``grid`` that keeps white-box ASR at 1.0.

    Uses only the surrogate ``net`` and its own threshold. Returns
    ``(eta, [(eta, white-box asr), ...])``; ``eta`` is 0 when no grid value
    qualifies.
    """
    cfg = replace(base, mode=mode)
    x_src = ds.images[[p.attacker_idx for p in pairs]]
    ref = reference_embeddings(net, ds, pairs, mode)
    refs = ds.images[[p.target_idx if mode == "impersonation" else p.attacker_idx for p in pairs]]
    seeds = [substream(seed, "tune", net.name, i) for i in range(len(pairs))]
    best, trail = 0.0, []
    for eta in sorted(grid):
        x_adv = craft(net, x_src, ref, replace(cfg, eta=float(eta)), seeds=seeds).x_adv
        asr = asr_from_distances(victim_distances(x_adv, refs, net), threshold, mode)
        trail.append((float(eta), asr))
        if asr >= 1.0:
            best = float(eta)
        else:
            break
    return best, trail


# ---------------------------------------------------------------------------
# reports


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.rows:
        writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(EvalRow(
            rec["surrogate"], rec["victim"], rec["attack"], rec["mode"], float(rec["asr"]),
            int(rec["n_pairs"]), float(rec["threshold"]), rec["is_whitebox"] == "true",
        ))
    return EvalReport(rows)


def report_json(report):
    rows = [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in report.rows]
    return json.dumps({"columns": list(REPORT_COLUMNS), "rows": rows}, indent=2) + "\n"


def parse_report_json(text):
    data = json.loads(text)
    return EvalReport([EvalRow(**row) for row in data["rows"]])


def _cell(v, whitebox):
    return f"{100 * v:.1f}" + ("*" if whitebox else "")


def report_markdown(report):
    """One table per baseline: rows are surrogates, columns victims, cells ``baseline / +BPFA``.

    The augmented value is bolded when it beats the baseline; ``*`` marks white-box cells.
    """
    attacks = list(dict.fromkeys(r.attack for r in report.rows))
    surrogates = list(dict.fromkeys(r.surrogate for r in report.rows))
    victims = list(dict.fromkeys(r.victim for r in report.rows))
    lookup = {(r.surrogate, r.victim, r.attack): r for r in report.rows}
    pairs = [(a, a + "+BPFA") for a in attacks if a + "+BPFA" in attacks]
    paired = {x for p in pairs for x in p}
    singles = [a for a in attacks if a not in paired]
    out = []
    header = "| surrogate | " + " | ".join(victims) + " |\n|---|" + "---|" * len(victims) + "\n"
    for base, aug in pairs:
        out.append(f"**{base} / {aug}**\n\n" + header)
        for s in surrogates:
            cells = []
            for v in victims:
                a, b = lookup.get((s, v, base)), lookup.get((s, v, aug))
                if a is None or b is None:
                    cells.append("-")
                    continue
                left, right = _cell(a.asr, a.is_whitebox), _cell(b.asr, b.is_whitebox)
                cells.append(f"{left} / **{right}**" if b.asr > a.asr else f"{left} / {right}")
            out.append(f"| {s} | " + " | ".join(cells) + " |\n")
        out.append("\n")
    for a in singles:
        out.append(f"**{a}**\n\n" + header)
        for s in surrogates:
            cells = [_cell(lookup[(s, v, a)].asr, lookup[(s, v, a)].is_whitebox) if (s, v, a) in lookup else "-"
                     for v in victims]
            out.append(f"| {s} | " + " | ".join(cells) + " |\n")
        out.append("\n")
    if not report.rows:
        out.append("| surrogate | victim | attack | asr |\n|---|---|---|---|\n")
    return "".join(out)


FORMATS = {
    "csv": report_csv,
    "json": report_json,
    "markdown": report_markdown,
    "markdown-table": report_markdown,
    "md": report_markdown,
}


def write_report(report, fmt, path=None):
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {sorted(FORMATS)}")
    text = FORMATS[fmt](report)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def write_curve(rows, path):
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in cols])


# ---------------------------------------------------------------------------
# plan files


PLAN_VERSION = 1
DEFAULT_ETA_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)
DEFAULT_TUNE_PAIRS = 200


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def attack_from_entry(name, entry):
    """``{"preset": "FMDN+BPFA", "eta": 0.1, ...}``; the preset defaults to the attack name."""
    entry = dict(entry)
    if entry.get("eta") == "auto":
        del entry["eta"]
    return preset(entry.pop("preset", name), **entry)


def plan_from_config(cfg, base_dir="."):
    """Build an :class:`ExperimentPlan` from a parsed plan file.

    Attack entries with ``"eta": "auto"`` get a step per surrogate from
    :func:`tune_eta`. The step is a property of the surrogate, so tuning
    always runs the attack in impersonation mode, on negative pairs disjoint
    from the evaluation pairs, against the surrogate's own impersonation
    threshold, whatever the plan's mode. Returns ``(plan, tuning)`` where ``tuning`` maps attack
    name to ``{surrogate: [(eta, white-box asr), ...]}``.
    """
    from bpfa.data import load_dataset, load_pairs, sample_pairs
    from bpfa.nn import load_model
    from bpfa.train import Threshold

    version = cfg.get("version")
    if version != PLAN_VERSION:
        raise PlanError(f"unsupported plan version {version!r}; expected {PLAN_VERSION}")
    for key in ("dataset", "surrogates", "attacks"):
        if key not in cfg:
            raise PlanError(f"plan lacks required key {key!r}")
    seed = int(cfg.get("seed", 0))
    mode = cfg.get("mode", "impersonation")
    if mode not in FAR_TARGETS:
        raise PlanError(f"unknown mode {mode!r}")
    polarity = "negative" if mode == "impersonation" else "positive"

    def need(path):
        full = _resolve(base_dir, path)
        if not os.path.exists(full):
            raise PlanError(f"missing artifact {full}")
        return full

    ds = load_dataset(need(cfg["dataset"]))
    models = {}

    def model(path):
        full = need(path)
        if full not in models:
            models[full] = load_model(full)
        return models[full]

    surrogates = {k: model(v) for k, v in cfg["surrogates"].items()}
    victims = {k: model(v) for k, v in cfg.get("victims", cfg["surrogates"]).items()}
    thresholds = {}
    for victim, entry in cfg.get("thresholds", {}).items():
        entry = entry if isinstance(entry, dict) else {mode: entry}
        thresholds[victim] = {m: Threshold.load(need(p)) for m, p in entry.items()}
    pairs_cfg = cfg.get("pairs", {"n": 200})
    if isinstance(pairs_cfg, str):
        pairs = load_pairs(need(pairs_cfg), ds)
    else:
        pairs = sample_pairs(ds, int(pairs_cfg["n"]), polarity, substream(seed, "pairs"))
    attacks = {name: attack_from_entry(name, entry) for name, entry in cfg["attacks"].items()}
    plan = ExperimentPlan(ds, surrogates, victims, thresholds, pairs, attacks, mode, seed,
                          output_dir=cfg.get("output_dir"))
    plan.validate()
    tuning = {}
    auto = [name for name, entry in cfg["attacks"].items() if entry.get("eta") == "auto"]
    if auto:
        grid = tuple(cfg.get("eta_grid", DEFAULT_ETA_GRID))
        n_tune = int(cfg.get("tune_pairs", DEFAULT_TUNE_PAIRS))
        used = {(p.attacker_idx, p.target_idx) for p in pairs}
        tune_pairs = sample_pairs(ds, n_tune, "negative", substream(seed, "tune-pairs"), exclude=used)
        for name in auto:
            plan.eta_for[name], tuning[name] = {}, {}
            base = replace(plan.attacks[name], mode="impersonation")
            for s, net in surrogates.items():
                own = thresholds.get(s, {}).get("impersonation")
                if own is None:
                    raise PlanError(f"surrogate {s!r} needs its own impersonation threshold to tune eta")
                eta, trail = tune_eta(net, ds, tune_pairs, own.value, base, grid, "impersonation", seed)
                plan.eta_for[name][s], tuning[name][s] = eta, trail
    return plan, tuning


def load_plan(path):
    with open(path) as fh:
        cfg = json.load(fh)
    return plan_from_config(cfg, os.path.dirname(os.path.abspath(path)))


def save_adversarial(plan, report, out_dir):
    """One dataset container per (surrogate, attack) holding the crafted images."""
    from bpfa.data import IdentityDataset, save_dataset

    os.makedirs(out_dir, exist_ok=True)
    labels = np.array([p.attacker_id for p in plan.pairs], dtype=np.int64)
    paths = []
    for (surrogate, attack), x_adv in report.adversarial.items():
        meta = {
            "surrogate": surrogate,
            "attack": attack,
            "mode": plan.mode,
            "config": plan.config_for(attack, surrogate).to_dict(),
            "pairs": [[p.attacker_idx, p.target_idx] for p in plan.pairs],
        }
        path = os.path.join(out_dir, f"adv_{surrogate}_{attack}.npz".replace("+", "_"))
        save_dataset(IdentityDataset(plan.dataset.params, x_adv, labels, meta), path)
        paths.append(path)
    return paths
