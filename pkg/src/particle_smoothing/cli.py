"""Command-line interface: ``psmooth <verb> ...``.

Verbs: gen-data, train-model, train-proposal, sample, evaluate, sweep.
Global flags come before the verb:

    psmooth --seed 3 --checkpoint-dir ckpt gen-data lastchar data/lastchar
"""
from __future__ import annotations

import json
import logging
import shutil
import sys
from pathlib import Path

import click
import numpy as np

from . import config as config_mod
from . import data
from .evaluation import SAMPLERS, ParticlePool, run_experiment
from .models import CharLM, PairLM, SourceSepModel, load_model, pairlm_train
from .oohmm import OohmmModel
from .proposal import NeuralProposal, ZeroCompatibility, load_proposal
from .smc import beam_sample, run_filter, run_smoother
from .trainer import TrainConfig, train_proposal

log = logging.getLogger("particle_smoothing")

TASKS = ("lastchar", "oohmm", "sourcesep")


class Ctx:
    def __init__(self, cfg, timing):
        self.cfg = cfg
        self.timing = timing

    @property
    def seed(self):
        return int(self.cfg["seed"])

    @property
    def ckpt(self):
        return Path(self.cfg["checkpoint_dir"])


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _model_path(ctx, model):
    if model:
        return model
    for cand in (ctx.ckpt / "model.oohmm.json", ctx.ckpt / "model.json"):
        if cand.exists():
            return str(cand)
    raise click.UsageError(f"no --model given and no model found in {ctx.ckpt}")


def _load_model(ctx, model):
    path = _model_path(ctx, model)
    try:
        return load_model(path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load model {path}: {exc}")


def _load_proposal(ctx, path):
    if path is None:
        # fall back to where train-proposal writes by default
        cand = ctx.ckpt / "proposal.json"
        if not cand.exists():
            return None
        path = str(cand)
    try:
        return load_proposal(path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load proposal {path}: {exc}")


def _inputs(model, data_dir, split, limit=0):
    path = Path(data_dir) / f"{split}.tsv"
    if not path.exists():
        raise click.ClickException(f"missing split file {path}")
    xs = data.read_inputs(path)
    if limit:
        xs = xs[:limit]
    return [model.encode_x(x) for x in xs]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=None, help="Root seed (overrides the config).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON config document.")
@click.option("--threads", type=int, default=None, help="Worker threads for evaluation.")
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), default=None,
              help="Where models, proposals and logs are written.")
@click.option("--timing/--no-timing", default=False,
              help="Fill wall-clock columns (outputs are then no longer byte-reproducible).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, seed, config_path, threads, checkpoint_dir, timing, verbose):
    """Particle smoothing for globally normalized sequence models."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.load(config_path)
    except config_mod.ConfigError as exc:
        raise click.ClickException(str(exc))
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    if checkpoint_dir is not None:
        cfg["checkpoint_dir"] = checkpoint_dir
    if cfg["threads"] < 1:
        raise click.BadParameter("--threads must be at least 1")
    ctx.obj = Ctx(cfg, timing)


# ---------------------------------------------------------------- gen-data

@main.command("gen-data")
@click.argument("task", type=click.Choice(TASKS))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--n", type=int, default=None, help="Total number of sequences.")
@click.option("--sizes", default=None, help="Comma-separated train,dev1,dev2,test sizes.")
@click.pass_obj
def gen_data(ctx, task, out_dir, n, sizes):
    """Generate a synthetic corpus with train/dev1/dev2/test splits."""
    p = dict(ctx.cfg["data"][task])
    if n is not None:
        p["n"] = n
    if sizes is not None:
        p["sizes"] = _ints(sizes)
    elif n is not None:
        p["sizes"] = _scale_sizes(p["sizes"], n)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sizes_t = tuple(p.pop("sizes"))
    if task == "lastchar":
        splits, info = data.build_lastchar(sizes=sizes_t, seed=ctx.seed, **p)
    elif task == "oohmm":
        splits, info, params = data.build_oohmm(sizes=sizes_t, seed=ctx.seed, **p)
        params.save(out / "model.oohmm.json")
    else:
        lm_kw = {k: ctx.cfg["model"][k] for k in ("d", "emb", "max_epochs", "lr", "l2", "batch_size")}
        splits, sources, info, lm = data.build_sourcesep(sizes=sizes_t, seed=ctx.seed, lm_kwargs=lm_kw, **p)
        data.write_sources(out, sources)
        SourceSepModel(lm, p.get("J", 2)).save(out / "model")
    params = info.pop("params")
    data.write_splits(out, splits, f"gen-data:{task}", ctx.seed, params, **info)
    click.echo(f"wrote {task} corpus to {out} " + " ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _scale_sizes(sizes, n):
    total = sum(sizes)
    out = [int(n * s // total) for s in sizes]
    out[0] += n - sum(out)
    return out


# ---------------------------------------------------------------- train-model

@main.command("train-model")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, help="Checkpoint path (default <checkpoint-dir>/model).")
@click.option("--oracle", is_flag=True, help="Copy the generating model instead of training one.")
@click.option("--max-epochs", type=int, default=None)
@click.pass_obj
def train_model(ctx, data_dir, out, oracle, max_epochs):
    """Fit the scoring model on the train split (early stopping on dev1)."""
    data_dir = Path(data_dir)
    manifest = data.read_manifest(data_dir)
    task = manifest["task"]
    mc = dict(ctx.cfg["model"])
    if max_epochs is not None:
        mc["max_epochs"] = max_epochs
    kw = {k: mc[k] for k in ("max_epochs", "lr", "l2", "batch_size", "patience")}
    if oracle:
        src = data_dir / ("model.oohmm.json" if task == "oohmm" else "model.json")
        if not src.exists():
            raise click.ClickException(f"task {task} has no generating model in {data_dir}")
        ctx.ckpt.mkdir(parents=True, exist_ok=True)
        if task == "oohmm":
            dest = Path(out) if out else ctx.ckpt / "model.oohmm.json"
            shutil.copyfile(src, dest)
        else:
            dest = Path(out).with_suffix("") if out else ctx.ckpt / "model"
            load_model(src).save(dest)
        click.echo(f"copied generating model to {dest}")
        return
    dest = Path(out) if out else ctx.ckpt / "model"
    splits = data.read_splits(data_dir)
    if task == "sourcesep":
        J = int(manifest["params"]["J"])
        lm = CharLM(manifest["x_alphabet"], mc["d"], mc["emb"], seed=ctx.seed)
        flat = lambda name: [s for srcs in data.read_sources(data_dir / f"{name}.sources.tsv") for s in srcs]
        history = lm.train(flat("train"), flat("dev1"), seed=ctx.seed, **kw)
        SourceSepModel(lm, J).save(dest, extra={"history": history})
    else:
        model = PairLM(manifest["x_alphabet"], manifest["y_alphabet"], mc["d"], mc["emb"], seed=ctx.seed)
        history = pairlm_train(model, splits["train"], splits["dev1"], seed=ctx.seed, **kw)
        model.save(dest, extra={"history": history})
    for epoch, loss, ppl in history:
        click.echo(f"epoch {epoch} train_nll {loss:.6f} dev_perplexity {ppl:.6f}")


# ---------------------------------------------------------------- train-proposal

def _train_config(ctx, **over):
    tc = dict(ctx.cfg["train"])
    tc.pop("dev_size")
    tc.update({k: v for k, v in over.items() if v is not None})
    tc["seed"] = ctx.seed
    return TrainConfig(**tc)


def _fit_proposal(ctx, model, data_dir, tcfg, out, log_path):
    pc = ctx.cfg["proposal"]
    train = _inputs(model, data_dir, "train")
    dev = _inputs(model, data_dir, "dev2", ctx.cfg["train"]["dev_size"])
    prop = NeuralProposal(len(model.x_alphabet), model.state_dim, pc["d"], pc["emb"], pc["enc_layers"],
                          pc["hidden"], pc["c_layers"], pc["use_hhat"], seed=ctx.seed)
    result = train_proposal(model, prop, train, tcfg, dev=dev, log_path=log_path, checkpoint_path=out,
                            timing=ctx.timing)
    return prop, result


@main.command("train-proposal")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--model", default=None, help="Scoring model checkpoint.")
@click.option("--out", default=None, help="Proposal checkpoint path (default <checkpoint-dir>/proposal).")
@click.option("--log", "log_path", default=None, help="Training log CSV (default <checkpoint-dir>/train_log.csv).")
@click.option("--lam", type=float, default=None, help="Weight of the exclusive KL term.")
@click.option("--m-train", type=int, default=None, help="Particles per training example.")
@click.option("--max-epochs", type=int, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.pass_obj
def train_proposal_cmd(ctx, data_dir, model, out, log_path, lam, m_train, max_epochs, steps_per_epoch):
    """Train the right-to-left proposal against a fixed model."""
    m = _load_model(ctx, model)
    tcfg = _train_config(ctx, lam=lam, M_train=m_train, max_epochs=max_epochs, steps_per_epoch=steps_per_epoch)
    ctx.ckpt.mkdir(parents=True, exist_ok=True)
    out = out or str(ctx.ckpt / "proposal")
    log_path = log_path or str(ctx.ckpt / "train_log.csv")
    _, result = _fit_proposal(ctx, m, data_dir, tcfg, out, log_path)
    click.echo(f"best epoch {result.best_epoch} dev offset KL {result.best_dev_kl:.6f} nats "
               f"(untrained {result.initial_dev_kl:.6f})")


# ---------------------------------------------------------------- sample

@main.command("sample")
@click.option("--model", default=None, help="Scoring model checkpoint.")
@click.option("--proposal", default=None, help="Proposal checkpoint (default <checkpoint-dir>/proposal.json).")
@click.option("--sampler", type=click.Choice(sorted(SAMPLERS)), default="PS")
@click.option("-M", "--particles", "M", type=int, default=32)
@click.option("--input", "inputs", multiple=True, help="Space-separated input symbols (repeatable).")
@click.option("--data", "data_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="TSV file whose first column supplies the inputs.")
@click.option("--out", default=None, help="JSON-lines output (default stdout).")
@click.option("--diagnostics", default=None, help="Per-step diagnostics JSON-lines (smoother only).")
@click.pass_obj
def sample(ctx, model, proposal, sampler, M, inputs, data_file, out, diagnostics):
    """Draw a weighted sample of taggings for each input."""
    m = _load_model(ctx, model)
    kind, resample = SAMPLERS[sampler]
    prop = _load_proposal(ctx, proposal) if kind == "smoother" else None
    if kind == "smoother" and prop is None:
        raise click.UsageError("PS samplers need --proposal")
    xs = [tuple(s.split()) for s in inputs]
    if data_file:
        xs.extend(data.read_inputs(data_file))
    if not xs:
        raise click.UsageError("give --input or --data")
    from .evaluation import example_seed

    lines = []
    for i, x in enumerate(xs):
        try:
            xi = m.encode_x(x)
        except ValueError as exc:
            raise click.ClickException(str(exc))
        seed = example_seed(ctx.seed, i)
        if kind == "beam":
            s = beam_sample(m, xi, M)
        elif kind == "filter":
            s = run_filter(m, xi, M, resample, seed=seed)
        else:
            s = run_smoother(m, prop, xi, M, resample, seed=seed, diagnostics_path=diagnostics)
        rec = {"x": list(x), "log_evidence": _num(s.log_evidence), "ess_mean": _num(s.ess_mean),
               "samples": [{"y": list(m.decode_y(y)), "weight": float(w), "G": float(g)}
                           for y, w, g in zip(s.sequences, s.weights, s.G)]}
        lines.append(json.dumps(rec, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------- evaluate / sweep

def _eval_opts(ctx, samplers, m_grid, seeds):
    ec = ctx.cfg["eval"]
    samplers = tuple(samplers.split(",")) if samplers else tuple(ec["samplers"])
    for s in samplers:
        if s not in SAMPLERS:
            raise click.BadParameter(f"unknown sampler {s!r}; choose from {', '.join(sorted(SAMPLERS))}")
    M_grid = tuple(_ints(m_grid)) if m_grid else tuple(ec["M_grid"])
    seeds = tuple(_ints(seeds)) if seeds else tuple(ec["seeds"])
    return samplers, M_grid, seeds


def _pool(path, reuse):
    if reuse and path and Path(path).exists():
        return ParticlePool.load(path)
    return ParticlePool()


@main.command("evaluate")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--model", default=None, help="Scoring model checkpoint.")
@click.option("--proposal", default=None, help="Proposal checkpoint (default <checkpoint-dir>/proposal.json).")
@click.option("--samplers", default=None, help="Comma-separated subset of PF,PS,PF:R,PS:R,BEAM.")
@click.option("--m-grid", default=None, help="Comma-separated particle counts.")
@click.option("--seeds", default=None, help="Comma-separated replicate seeds.")
@click.option("--split", default=None)
@click.option("--limit", type=int, default=None, help="Use only the first N inputs.")
@click.option("--out", default="results.csv", show_default=True)
@click.option("--pool", "pool_path", default=None, help="Pool cache (JSON lines); written after the run.")
@click.option("--reuse-pool", is_flag=True, help="Start from the existing pool cache.")
@click.pass_obj
def evaluate(ctx, data_dir, model, proposal, samplers, m_grid, seeds, split, limit, out, pool_path, reuse_pool):
    """Offset-KL table for samplers x M (CSV)."""
    m = _load_model(ctx, model)
    samplers, M_grid, seeds = _eval_opts(ctx, samplers, m_grid, seeds)
    prop = _load_proposal(ctx, proposal)
    if prop is None and any(SAMPLERS[s][0] == "smoother" for s in samplers):
        raise click.UsageError("PS samplers need --proposal")
    ec = ctx.cfg["eval"]
    inputs = _inputs(m, data_dir, split or ec["split"], ec["limit"] if limit is None else limit)
    task = data.read_manifest(data_dir)["task"]
    pool = _pool(pool_path, reuse_pool)
    report, pool = run_experiment(m, prop, inputs, task, samplers, M_grid, seeds, pool, ctx.cfg["threads"])
    report.to_csv(out, timing=ctx.timing)
    if pool_path:
        pool.save(pool_path)
    click.echo(report.to_csv(timing=ctx.timing), nl=False)


@main.command("sweep")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--model", default=None, help="Scoring model checkpoint.")
@click.option("--lams", default=None, help="Comma-separated interpolation weights (default 0,0.5,1).")
@click.option("--m-train", default=None, help="Comma-separated training particle counts.")
@click.option("--m-grid", default=None, help="Evaluation particle counts (default 32).")
@click.option("--max-epochs", type=int, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.option("--split", default=None)
@click.option("--limit", type=int, default=None)
@click.option("--out", default="sweep.csv", show_default=True)
@click.pass_obj
def sweep(ctx, data_dir, model, lams, m_train, m_grid, max_epochs, steps_per_epoch, split, limit, out):
    """Train one proposal per (lambda, M_train) and compare them with PF on one pool."""
    m = _load_model(ctx, model)
    sc = ctx.cfg["sweep"]
    lams = _floats(lams) if lams else [float(v) for v in sc["lams"]]
    m_trains = _ints(m_train) if m_train else [int(v) for v in sc["M_train"]]
    M_grid = tuple(_ints(m_grid)) if m_grid else (32,)
    ctx.ckpt.mkdir(parents=True, exist_ok=True)
    props = {}
    for lam in lams:
        for mt in m_trains:
            label = f"lam={lam:g},M_train={mt}"
            stem = f"proposal_lam{int(round(lam * 1000)):04d}_m{mt}"
            tcfg = _train_config(ctx, lam=lam, M_train=mt, max_epochs=max_epochs, steps_per_epoch=steps_per_epoch)
            prop, result = _fit_proposal(ctx, m, data_dir, tcfg, str(ctx.ckpt / stem),
                                         str(ctx.ckpt / f"{stem}_log.csv"))
            click.echo(f"{label}: best epoch {result.best_epoch} dev offset KL {result.best_dev_kl:.6f} nats",
                       err=True)
            props[label] = prop
    ec = ctx.cfg["eval"]
    inputs = _inputs(m, data_dir, split or ec["split"], ec["limit"] if limit is None else limit)
    task = data.read_manifest(data_dir)["task"]
    report, _ = run_experiment(m, props, inputs, task, ("PF", "PS"), M_grid, tuple(ec["seeds"]),
                               threads=ctx.cfg["threads"])
    report.to_csv(out, timing=ctx.timing)
    click.echo(report.to_csv(timing=ctx.timing), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
