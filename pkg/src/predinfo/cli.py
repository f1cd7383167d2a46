"""Command-line entry point: ``predinfo <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bho, diffcore, gib, miest, rnn
from .pipeline import classify, data, plot, sweep

log = logging.getLogger("predinfo")

NUMERICAL = (rnn.TrainingDiverged, diffcore.NonFiniteError, FloatingPointError, np.linalg.LinAlgError,
             bho.UnstableDynamicsError, gib.DegenerateSpectrumError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bho_args(p):
    d = bho.BHOParams()
    p.add_argument("--omega", type=float, default=d.omega)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--D", type=float, default=d.D)
    p.add_argument("--dt", type=float, default=d.dt)


def _params(a) -> bho.BHOParams:
    return bho.BHOParams(a.omega, a.gamma, a.D, a.dt)


def _window_args(p):
    w = bho.WindowSpec()
    p.add_argument("--t-past", type=int, default=w.t_past)
    p.add_argument("--t-future", type=int, default=w.t_future)
    p.add_argument("--total-len", type=int, default=w.total_len)
    p.add_argument("--split-index", type=int, default=w.split_index)


def _window(a) -> bho.WindowSpec:
    return bho.WindowSpec(a.t_past, a.t_future, a.total_len, a.split_index)


# ---------------------------------------------------------------------------
# subcommands


def cmd_bho_gen(a):
    batch = bho.simulate(_params(a), a.n, a.steps, a.seed, workers=a.workers)
    ds = data.from_batch(batch, (a.train_frac, a.val_frac, 1.0 - a.train_frac - a.val_frac), label=a.label)
    data.export(a.out, ds)
    print(f"wrote {len(ds)} sequences of length {a.steps} to {a.out}")


def cmd_gib_frontier(a):
    joint = bho.window_covariances(_params(a), bho.WindowSpec.centered(a.t_past, a.t_future))
    spectrum = gib.ib_spectrum(joint)
    table = gib.frontier_table(spectrum, a.i_max, a.points)
    plot.write_frontier_csv(table, a.out)
    curve = gib.FrontierCurve(spectrum)
    print(f"I(past; future) = {joint.mutual_information():.6f} nats; asymptote {curve.asymptote:.6f}")
    print(f"wrote {len(table)} frontier points to {a.out}")


def cmd_train(a):
    length = a.seq_len
    if a.data == "bho":
        source = bho.BHOSource(seq_len=length)
        dim = 1
    else:
        ds = data.ingest(a.data, length)
        source = rnn.CropSource(ds.split("train"), length)
        dim = ds.dim
    cfg = rnn.RNNConfig(cell=a.cell, hidden_dim=a.hidden, input_dim=dim, noise_sigma=a.sigma,
                        dropout_keep=a.dropout_keep, seed=a.seed)
    kw = dict(objective=a.objective, seed=a.seed, train_noise=a.sigma > 0 and not a.posthoc,
              checkpoint_every=a.checkpoint_every, checkpoint_dir=str(Path(a.out).parent) if a.checkpoint_every else None)
    for key in ("steps", "lr", "batch"):
        if getattr(a, key) is not None:
            kw[key] = getattr(a, key)
    tc = rnn.TrainConfig.paper_scale(**kw) if a.paper_scale else rnn.TrainConfig(**kw)
    model = rnn.RNNModel.create(cfg)

    def report(step, loss):
        if (step + 1) % max(tc.steps // 10, 1) == 0:
            log.info("step %d loss %.4f", step + 1, loss)

    res = rnn.train(model, source, tc, callback=report)
    final = float(res.losses[-1]) if tc.steps else None
    rnn.save_checkpoint(model, a.out, meta={"label": a.label or Path(a.out).stem, "train": tc.__dict__, "final_loss": final})
    print(f"saved {a.out}" + (f" (final loss {res.losses[-1]:.4f})" if tc.steps else ""))


def cmd_estimate(a):
    model, _ = rnn.load_checkpoint(a.checkpoint)
    sigma = model.config.noise_sigma if a.sigma is None else a.sigma
    if not sigma > 0:
        raise UsageError("evaluation noise sigma must be > 0 (pass --sigma)")
    spec = _window(a)
    rng = np.random.default_rng(a.seed)
    if a.data == "bho":
        src = bho.BHOSource(seq_len=spec.total_len)
        splits = [src.sample(n, rng) for n in (a.n_train, a.n_val, a.n_test)]
        dataset_id = "bho"
    else:
        ds = data.ingest(a.data, spec.total_len)
        splits = [ds.stacked(s, spec.total_len) for s in ("train", "val", "test")]
        dataset_id = Path(a.data).name
    reps = [rnn.collect_representations(model, s, spec, sigma, rng) for s in splits]
    critic = miest.EarlyStopConfig() if a.paper_scale else miest.EarlyStopConfig.desk_scale()
    protocol = miest.EstimateProtocol(mb_batch=a.mb_batch, critic=critic, past_critic=a.past_critic, seed=a.seed)
    point = miest.estimate_plane_point(*reps, protocol, model_id=a.model_id or Path(a.checkpoint).stem,
                                       cell=model.config.cell, train_noise_sigma=model.config.noise_sigma,
                                       seed=a.seed, mode=a.mode, dataset_id=dataset_id)
    miest.write_points_csv([point], a.out)
    print(f"I_past in [{point.i_past_lower:.4f}, {point.i_past_upper:.4f}], I_future {point.i_future_nce:.4f}; wrote {a.out}")


def cmd_sweep(a):
    overrides = {}
    if a.paper_scale:
        overrides["scale"] = "paper"
    if a.workers:
        overrides["workers"] = a.workers
    cfg = sweep.load_config(a.config, **overrides) if a.config else sweep.SweepConfig(**overrides)
    res = sweep.run_sweep(cfg, a.out, progress=lambda p: log.info(
        "%s sigma=%.4g: I_past [%.3f, %.3f] I_future %.3f", p.model_id, p.eval_noise_sigma,
        p.i_past_lower, p.i_past_upper, p.i_future_nce))
    print(f"{len(res.points)} points, {len(res.failures)} failures; results in {a.out}")
    bad = sweep.dpi_violations(res.points)
    if bad:
        print(f"warning: {len(bad)} points violate I_future <= I_past_upper + 0.1")


def cmd_classify(a):
    models = {}
    for path in a.models:
        model, meta = rnn.load_checkpoint(path)
        models[meta.get("label", Path(path).stem)] = model
    ds = data.ingest(a.data)
    seqs, labels = ds.split(a.split), ds.labels[a.split]
    prior = [float(v) for v in a.prior.split(",")] if a.prior else None
    names = list(models)
    rows = []
    correct = 0
    for seq, lab in zip(seqs, labels):
        res = classify.naive_bayes([models[n] for n in names], seq, prior)
        pred = names[int(res.predicted[0])]
        correct += pred == lab
        rows.append([str(lab), pred] + [repr(float(p)) for p in res.posterior[0]])
    if a.out:
        lines = [",".join(["label", "predicted"] + [f"p_{n}" for n in names])] + [",".join(r) for r in rows]
        Path(a.out).write_text("\n".join(lines) + "\n")
    if all(lab is not None for lab in labels):
        print(f"accuracy {correct / len(seqs):.4f} on {len(seqs)} {a.split} sequences")


def cmd_plot(a):
    plot.emit_plot(a.points, a.out, a.frontier)
    print(f"wrote {a.out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="predinfo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("bho-gen", help="simulate oscillator trajectories into a dataset file")
    _bho_args(s)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-frac", type=float, default=0.8)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--label", default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bho_gen)

    s = sub.add_parser("gib-frontier", help="analytic optimal frontier for oscillator windows")
    _bho_args(s)
    s.add_argument("--t-past", type=int, default=18)
    s.add_argument("--t-future", type=int, default=18)
    s.add_argument("--i-max", type=float, default=None)
    s.add_argument("--points", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gib_frontier)

    s = sub.add_parser("train", help="train a stochastic RNN")
    s.add_argument("--data", default="bho", help="'bho' or a dataset file")
    s.add_argument("--cell", choices=rnn.CELLS, default="vanilla")
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--posthoc", action="store_true", help="store sigma but train without noise")
    s.add_argument("--objective", choices=("mle", "cpc"), default="mle")
    s.add_argument("--dropout-keep", type=float, default=1.0)
    s.add_argument("--seq-len", type=int, default=100)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label", default=None, help="class name stored for classify")
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate", help="information-plane point for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default="bho")
    s.add_argument("--sigma", type=float, default=None, help="evaluation noise (default: the model's)")
    _window_args(s)
    s.add_argument("--n-train", type=int, default=8192)
    s.add_argument("--n-val", type=int, default=2048)
    s.add_argument("--n-test", type=int, default=4096)
    s.add_argument("--mb-batch", type=int, default=4096)
    s.add_argument("--past-critic", action="store_true")
    s.add_argument("--mode", default="")
    s.add_argument("--model-id", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sweep", help="run an information-plane sweep")
    s.add_argument("--config", default=None, help="key = value config file")
    s.add_argument("--workers", type=int, default=0)
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("classify", help="naive-Bayes classification with per-class models")
    s.add_argument("--models", nargs="+", required=True, help="one checkpoint per class")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--prior", default=None, help="comma-separated class probabilities")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("plot", help="SVG of an information-plane points file")
    s.add_argument("--points", required=True)
    s.add_argument("--frontier", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
