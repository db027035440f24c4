"""Command-line entry point: ``bpfa <subcommand> ...``.

Every subcommand accepts ``--config FILE``; keys in that JSON file override
the corresponding flags. Failures print one JSON object
``{"error": <class>, "message": <text>}`` to stderr and exit with the code
listed in :data:`EXIT_CODES`.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from bpfa import attacks, data, harness, nn, train

log = logging.getLogger("bpfa")

EXIT_CODES = {
    "PlanError": 3,
    "ModelFormatError": 4,
    "DatasetFormatError": 4,
    "TrainingError": 5,
    "HookError": 6,
    "ShapeError": 6,
    "NonFiniteError": 7,
    "ValueError": 2,
    "KeyError": 2,
    "FileNotFoundError": 8,
}


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _merge(args, cfg):
    """Overlay config-file keys (dashes or underscores) onto parsed flags."""
    merged = vars(args).copy()
    for key, value in cfg.items():
        merged[key.replace("-", "_")] = value
    return argparse.Namespace(**merged)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a):
    fields = {f.name for f in dataclasses.fields(data.DatasetParams)}
    params = data.DatasetParams(**{k: v for k, v in vars(a).items() if k in fields and v is not None})
    ds = data.generate(params)
    _parent(a.out)
    data.save_dataset(ds, a.out)
    print(json.dumps({"images": len(ds), "separable": ds.metadata["separable"], "out": a.out}))


def cmd_train(a):
    ds = data.load_dataset(a.data)
    fields = {f.name for f in dataclasses.fields(train.TrainConfig)}
    kw = {k: v for k, v in vars(a).items() if k in fields and v is not None}
    kw["adversarial_training"] = bool(a.robust)
    result = train.fit(ds, train.TrainConfig(**kw))
    _parent(a.out)
    nn.save_model(result.net, a.out)
    if a.log:
        train.write_train_log(result.log, a.log)
    print(json.dumps({"model": result.net.name, "heldout_accuracy": result.heldout_accuracy, "out": a.out}))


def cmd_calibrate(a):
    ds = data.load_dataset(a.data)
    net = nn.load_model(a.model)
    far = a.far if a.far is not None else harness.FAR_TARGETS[a.mode]
    th = train.calibrate_threshold(net, ds, far)
    _parent(a.out)
    th.save(a.out)
    print(json.dumps(dataclasses.asdict(th)))


def _attack_config(a):
    fields = {f.name for f in dataclasses.fields(attacks.AttackConfig)}
    kw = {k: v for k, v in vars(a).items() if k in fields and v is not None}
    if isinstance(kw.get("hooks"), str) and kw["hooks"].replace(",", "").isdigit():
        kw["hooks"] = tuple(int(i) for i in kw["hooks"].split(","))
    return attacks.preset(a.attack, **kw)


def cmd_attack(a):
    ds = data.load_dataset(a.data)
    net = nn.load_model(a.model)
    cfg = _attack_config(a)
    polarity = "negative" if cfg.mode == "impersonation" else "positive"
    if a.pairs:
        pairs = data.load_pairs(a.pairs, ds)
    else:
        pairs = data.sample_pairs(ds, a.n_pairs, polarity, harness.substream(cfg.seed, "pairs"))
    seeds = [harness.substream(cfg.seed, "craft", net.name, i) for i in range(len(pairs))]
    res = attacks.run_attack_batch(net, ds, pairs, cfg, seeds=seeds)
    _parent(a.out)
    labels = np.array([p.attacker_id for p in pairs], dtype=np.int64)
    meta = {"surrogate": net.name, "attack": a.attack, "config": cfg.to_dict(),
            "pairs": [[p.attacker_idx, p.target_idx] for p in pairs]}
    data.save_dataset(data.IdentityDataset(ds.params, res.x_adv, labels, meta), a.out)
    if a.log:
        with open(a.log, "w") as fh:
            fh.write("t,loss,bank_bytes\n")
            for r in res.log_rows():
                fh.write(f"{r['t']},{r['loss']!r},{r['bank_bytes']}\n")
    print(json.dumps({"pairs": len(pairs), "final_loss": float(res.losses[-1].mean()), "out": a.out}))


def _plan(a):
    plan, tuning = harness.load_plan(a.plan)
    if tuning:
        log.info("tuned feature steps: %s", {k: plan.eta_for[k] for k in tuning})
    return plan, tuning


def cmd_matrix(a):
    plan, tuning = _plan(a)
    report = harness.run_transfer_matrix(plan)
    _parent(a.out)
    harness.write_report(report, a.format, a.out)
    out_dir = a.adv_dir or plan.output_dir
    if out_dir:
        harness.save_adversarial(plan, report, out_dir)
    if tuning:
        _write_json({k: {s: {"eta": plan.eta_for[k][s], "trail": t} for s, t in v.items()}
                     for k, v in tuning.items()}, os.path.splitext(a.out)[0] + "_eta.json")
    print(json.dumps({"rows": len(report.rows), "out": a.out}))


def cmd_sweep_eta(a):
    plan, _ = _plan(a)
    etas = [float(e) for e in str(a.etas).split(",")]
    rows = harness.sweep_eta(plan, etas, a.attack)
    _parent(a.out)
    harness.write_curve(rows, a.out)
    print(json.dumps({"points": len(rows), "out": a.out}))


def cmd_sweep_iters(a):
    plan, _ = _plan(a)
    grid = [int(n) for n in str(a.grid).split(",")]
    rows = harness.sweep_iterations(plan, grid, a.baseline, a.augmented)
    _parent(a.out)
    harness.write_curve(rows, a.out)
    print(json.dumps({"points": len(rows), "out": a.out}))


def cmd_report(a):
    with open(a.input) as fh:
        text = fh.read()
    report = harness.parse_report_json(text) if a.input.endswith(".json") else harness.parse_report_csv(text)
    out = harness.write_report(report, a.format, a.out)
    if a.out is None:
        sys.stdout.write(out)


# ---------------------------------------------------------------------------
# parser


def _add_attack_flags(p):
    p.add_argument("--attack", default="FIM", help="preset name, optionally suffixed +BPFA or +APFA")
    for f in dataclasses.fields(attacks.AttackConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool or isinstance(f.default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "hooks":
            p.add_argument(flag, default=None, help="layer kind or comma-separated 1-based indices")
        elif f.name == "mode":
            p.add_argument(flag, choices=attacks.MODES, default=None)
        else:
            p.add_argument(flag, type=type(f.default), default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bpfa", description="Craft and evaluate transferable attacks on face-embedding networks."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file whose keys override flags")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic identity dataset")
    p.add_argument("--out", default="data.npz")
    for f in dataclasses.fields(data.DatasetParams):
        if f.name != "image_shape":
            p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=None)
    p.add_argument("--image-shape", type=lambda s: tuple(int(v) for v in s.split(",")), default=None)

    p = command("train", cmd_train, "train one embedding network")
    p.add_argument("--data", default="data.npz")
    p.add_argument("--out", default="model.npz")
    p.add_argument("--robust", action="store_true", help="adversarial training with dodging examples")
    p.add_argument("--log", help="CSV training log")
    for f in dataclasses.fields(train.TrainConfig):
        if f.name == "adversarial_training":
            continue
        kind = float if f.name == "adv_beta" else type(f.default)
        p.add_argument("--" + f.name.replace("_", "-"), type=kind, default=None)

    p = command("calibrate", cmd_calibrate, "calibrate a verification threshold on all negative pairs")
    p.add_argument("--model", required=False)
    p.add_argument("--data", default="data.npz")
    p.add_argument("--mode", choices=attacks.MODES, default="impersonation")
    p.add_argument("--far", type=float, default=None, help="defaults to 0.001 (impersonation) or 0.01 (dodging)")
    p.add_argument("--out", default="threshold.json")

    p = command("attack", cmd_attack, "craft adversarial examples on one surrogate")
    p.add_argument("--model")
    p.add_argument("--data", default="data.npz")
    p.add_argument("--pairs", help="pairs CSV; sampled from --seed when absent")
    p.add_argument("--n-pairs", type=int, default=20)
    p.add_argument("--out", default="adv.npz")
    p.add_argument("--log", help="CSV loss trajectory")
    _add_attack_flags(p)

    p = command("matrix", cmd_matrix, "run the surrogate x victim transfer matrix")
    p.add_argument("--plan")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--format", default="csv", choices=sorted(harness.FORMATS))
    p.add_argument("--adv-dir", help="directory for adversarial image dumps")

    p = command("sweep-eta", cmd_sweep_eta, "black-box ASR against the feature step")
    p.add_argument("--plan")
    p.add_argument("--attack", default="FIM+BPFA")
    p.add_argument("--etas", default="-0.1,0,0.05,0.1,0.2,0.4,0.8")
    p.add_argument("--out", default="eta_curve.csv")

    p = command("sweep-iters", cmd_sweep_iters, "black-box ASR against iteration count")
    p.add_argument("--plan")
    p.add_argument("--baseline", default="FMDN")
    p.add_argument("--augmented", default="FMDN+BPFA")
    p.add_argument("--grid", default="0,10,20,50,100")
    p.add_argument("--out", default="iter_curve.csv")

    p = command("report", cmd_report, "convert a CSV or JSON report")
    p.add_argument("--input", "--in", dest="input")
    p.add_argument("--format", default="markdown", choices=sorted(harness.FORMATS))
    p.add_argument("--out")
    return parser


REQUIRED = {
    "train": ("data",),
    "calibrate": ("model", "data"),
    "attack": ("model", "data"),
    "matrix": ("plan",),
    "sweep-eta": ("plan",),
    "sweep-iters": ("plan",),
    "report": ("input",),
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        a = _merge(args, _load_config(args.config))
        missing = [k for k in REQUIRED.get(a.command, ()) if getattr(a, k, None) is None]
        if missing:
            raise ValueError(f"{a.command}: missing required option(s) {', '.join('--' + m for m in missing)}")
        a.func(a)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        name = type(exc).__name__
        code = EXIT_CODES.get(name)
        if code is None:
            code = next((c for n, c in EXIT_CODES.items() for k in type(exc).__mro__ if k.__name__ == n), 1)
        sys.stderr.write(json.dumps({"error": name, "message": str(exc)}) + "\n")
        if args.verbose:
            raise
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
