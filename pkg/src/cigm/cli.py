"""Command-line entry point.

Every subcommand writes into ``--out``: a ``manifest.json`` (resolved config,
format version, content hash of the inputs) plus its own CSV/JSON/checkpoint
outputs. On failure the last line written to stderr is a JSON object
``{"error": <code>, "message": ...}`` and the exit status is nonzero.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import zlib
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import CigmError, SchemaError, UsageError

MANIFEST_VERSION = 1


# -- helpers -------------------------------------------------------------------

def derive_seed(seed: int, name: str) -> int:
    """Named sub-stream of the global seed, stable under changes elsewhere."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def blob_hash(data: bytes) -> str:
    """Git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs: dict[str, Path | None]) -> dict:
    hashes = {k: blob_hash(Path(p).read_bytes()) if p else None for k, p in inputs.items()}
    body = {"format_version": MANIFEST_VERSION, "package_version": __version__, "command": command,
            "config": config, "inputs": {k: str(p) if p else None for k, p in inputs.items()},
            "input_hashes": hashes}
    body["content_hash"] = blob_hash(json.dumps(body, sort_keys=True).encode())
    (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    return body


def resolve_config(cls, path: str | None, **overrides):
    """Dataclass defaults, then the JSON config file, then command-line overrides."""
    values = {}
    if path:
        values = json.loads(Path(path).read_text())
        if not isinstance(values, dict):
            raise SchemaError("config file must hold a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise SchemaError(f"unknown config keys {sorted(unknown)} for {cls.__name__}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    for f in dataclasses.fields(cls):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_labels_file(path: str | None, seed: int):
    """Labels from a CSV (header row), an attribute file, or the bundled stand-in."""
    from .celeba import ingest_celeba_attrs, load_labels
    from .scm import read_dataset

    if path is None:
        labels, data, _ = load_labels(None, seed)
        return labels, data
    first = Path(path).open().readline().strip()
    if first.isdigit():
        labels, data, _ = ingest_celeba_attrs(path)
        return labels, data
    labels, data = read_dataset(path)
    return labels, data


def split_features(header, data, label_names):
    missing = [l for l in label_names if l not in header]
    if missing:
        raise SchemaError(f"data file lacks label column(s) {missing}")
    li = [header.index(l) for l in label_names]
    fi = [i for i in range(len(header)) if i not in li]
    if not fi:
        raise SchemaError("data file has no feature columns")
    return data[:, fi], data[:, li], [header[i] for i in fi]


def echo_json(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


# -- commands ------------------------------------------------------------------

@click.group()
@click.version_option(__version__)
def cli():
    """Causal implicit generative models: controllers, conditional GANs, oracles."""


@cli.command("gen-synthetic")
@click.option("--graph", "graph_ref", default="line", show_default=True, help="Graph file or bundled name.")
@click.option("--kind", type=click.Choice(["cubic", "discrete", "mixture"]), default="cubic", show_default=True)
@click.option("-n", "n", type=int, default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def gen_synthetic(graph_ref, kind, n, seed, out):
    """Sample a dataset from a random SCM over GRAPH."""
    from .causalgan import MixtureToy
    from .graph import load_graph
    from .scm import exact_joint, make_cubic_scm, random_discrete_scm, sample, save_scm, write_dataset

    out = outdir(out)
    g = load_graph(graph_ref)
    if kind == "cubic":
        scm = make_cubic_scm(g, derive_seed(seed, "scm"))
        write_dataset(out / "data.csv", g.nodes, sample(scm, n, derive_seed(seed, "data")))
    else:
        scm = random_discrete_scm(g, derive_seed(seed, "scm"))
        if kind == "discrete":
            write_dataset(out / "data.csv", g.nodes, sample(scm, n, derive_seed(seed, "data")), binary=True)
        else:
            toy = MixtureToy(exact_joint(scm))
            x, l = toy.sample(n, np.random.default_rng(derive_seed(seed, "data")))
            names = list(g.nodes) + [f"f{i}" for i in range(x.shape[1])]
            write_dataset(out / "data.csv", names, np.column_stack([l, x]))
    save_scm(scm, out / "scm.json")
    graph_path = Path(graph_ref) if Path(graph_ref).exists() else None
    write_manifest(out, "gen-synthetic", {"graph": graph_ref, "kind": kind, "n": n, "seed": seed},
                   {"graph": graph_path})
    echo_json({"data": str(out / "data.csv"), "rows": n})


@cli.command("train-controller")
@click.option("--graph", "graph_ref", default="cg1", show_default=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              help="Label CSV or attribute file; the bundled stand-in when omitted.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def train_controller_cmd(graph_ref, data_path, config_path, seed, steps, out):
    """Train a causal controller over binary labels."""
    from .controller import ControllerTrainConfig, build_graph_generator, save_generator, train_controller
    from .graph import load_graph

    out = outdir(out)
    g = load_graph(graph_ref)
    labels, data = read_labels_file(data_path, derive_seed(seed, "standin"))
    if tuple(labels) != g.nodes:
        idx = [list(labels).index(n) for n in g.nodes if n in labels]
        if len(idx) != len(g.nodes):
            raise SchemaError(f"data columns {labels} do not cover graph nodes {g.nodes}")
        data, labels = data[:, idx], g.nodes
    cfg = resolve_config(ControllerTrainConfig, config_path, steps=steps, seed=derive_seed(seed, "controller"))
    gen = build_graph_generator(g, cfg, seed=derive_seed(seed, "controller-init"))
    gen, trace, _ = train_controller(gen, data, cfg, labels=labels, log=lambda m: click.echo(m, err=True))
    trace.write_csv(out / "metrics.csv")
    save_generator(out / "controller.ckpt", gen, {"config": config_dict(cfg)})
    write_manifest(out, "train-controller", {"graph": graph_ref, "seed": seed, **config_dict(cfg)},
                   {"data": Path(data_path) if data_path else None, "config": Path(config_path) if config_path else None})
    echo_json({"final_tvd": float(trace.column("tvd")[-1]), "checkpoint": str(out / "controller.ckpt")})


def _conditional_data(data_path, controller_path, label_names):
    from .causalgan import TableSampler
    from .controller import load_generator
    from .evaluation import empirical_joint
    from .scm import read_dataset

    header, data = read_dataset(data_path)
    if controller_path:
        source, _ = load_generator(controller_path)
        names = source.labels
    else:
        if not label_names:
            raise UsageError("give --labels when no --controller is supplied")
        names = tuple(label_names.split(","))
        source = None
    x, l, _ = split_features(list(header), data, names)
    if source is None:
        source = TableSampler(empirical_joint(np.rint(l).astype(np.int64), names))
    return source, x, l, names


@cli.command("train-causalgan")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV with label columns and feature columns.")
@click.option("--controller", "controller_path", type=click.Path(exists=True, dir_okay=False),
              help="Controller checkpoint; the empirical label joint when omitted.")
@click.option("--labels", "label_names", help="Comma-separated label columns (without --controller).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def train_causalgan_cmd(data_path, controller_path, label_names, config_path, seed, steps, out):
    """Train the conditional generator with Labeler and Anti-Labeler."""
    from .causalgan import CgTrainConfig, train_causalgan
    from .nn import save_checkpoint

    out = outdir(out)
    source, x, l, names = _conditional_data(data_path, controller_path, label_names)
    cfg = resolve_config(CgTrainConfig, config_path, steps=steps, seed=derive_seed(seed, "causalgan"))
    nets, trace = train_causalgan(source, x, l, cfg, label_names=names, log=lambda m: click.echo(m, err=True))
    trace.write_csv(out / "metrics.csv")
    g = nets["generator"]
    save_checkpoint(out / "causalgan.ckpt",
                    {"generator": g.net, "discriminator": nets["discriminator"],
                     "labeler": nets["labeler"], "antilabeler": nets["antilabeler"]},
                    {"config": config_dict(cfg), "labels": list(names), "noise_dim": g.noise_dim})
    write_manifest(out, "train-causalgan", {"seed": seed, **config_dict(cfg)},
                   {"data": Path(data_path), "controller": Path(controller_path) if controller_path else None,
                    "config": Path(config_path) if config_path else None})
    echo_json({"checkpoint": str(out / "causalgan.ckpt"), "final_g_loss": float(trace.column("g_loss")[-1])})


@cli.command("train-causalbegan")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--controller", "controller_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", "label_names")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def train_causalbegan_cmd(data_path, controller_path, label_names, config_path, seed, steps, out):
    """Train the boundary-equilibrium variant with label margins."""
    from .causalbegan import BeganTrainConfig, train_causalbegan
    from .nn import save_checkpoint

    out = outdir(out)
    source, x, l, names = _conditional_data(data_path, controller_path, label_names)
    cfg = resolve_config(BeganTrainConfig, config_path, steps=steps, seed=derive_seed(seed, "causalbegan"))
    gen, disc, state, trace = train_causalbegan(source, x, l, cfg, label_names=names,
                                                log=lambda m: click.echo(m, err=True))
    trace.write_csv(out / "metrics.csv")
    save_checkpoint(out / "causalbegan.ckpt", {"generator": gen.net, **disc.networks()},
                    {"config": config_dict(cfg), "labels": list(names), "noise_dim": gen.noise_dim,
                     "margins": dataclasses.asdict(state)})
    write_manifest(out, "train-causalbegan", {"seed": seed, **config_dict(cfg)},
                   {"data": Path(data_path), "controller": Path(controller_path) if controller_path else None,
                    "config": Path(config_path) if config_path else None})
    echo_json({"checkpoint": str(out / "causalbegan.ckpt"), "final_m_complete": float(trace.column("m_complete")[-1])})


@cli.command("sample")
@click.option("--controller", "controller_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--generator", "generator_path", type=click.Path(exists=True, dir_okay=False),
              help="Conditional generator checkpoint (causalgan or causalbegan).")
@click.option("-n", "n", type=int, default=1000, show_default=True)
@click.option("--observe", is_flag=True)
@click.option("--do", "do_spec", help='Intervention, e.g. "Mustache=1".')
@click.option("--cond", "cond_spec", help='Evidence, e.g. "Mustache=1".')
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def sample_cmd(controller_path, generator_path, n, observe, do_spec, cond_spec, seed, out):
    """Sample labels (and features) under observation, intervention or conditioning."""
    from .causalgan import CondGenerator, sample_joint
    from .controller import load_generator
    from .graph import parse_assignment
    from .nn import load_checkpoint
    from .scm import write_dataset

    modes = [m for m, on in (("observe", observe), ("do", do_spec), ("condition", cond_spec)) if on]
    if len(modes) != 1:
        raise UsageError("give exactly one of --observe, --do, --cond")
    out = outdir(out)
    ctrl, _ = load_generator(controller_path)
    cond_gen = None
    if generator_path:
        nets, meta = load_checkpoint(generator_path)
        if list(meta.get("labels", [])) != list(ctrl.labels):
            raise SchemaError("generator and controller were trained on different labels")
        cond_gen = CondGenerator(nets["generator"], int(meta["noise_dim"]), len(ctrl.labels))
    s = parse_assignment(do_spec) if do_spec else None
    ev = parse_assignment(cond_spec) if cond_spec else None
    labels, feats = sample_joint(ctrl, cond_gen, n, modes[0], s=s, evidence=ev, seed=derive_seed(seed, "sample"))
    names = list(ctrl.labels) + [f"f{i}" for i in range(feats.shape[1])]
    write_dataset(out / "samples.csv", names, np.column_stack([labels, feats]))
    marg = {name: float(labels[:, i].mean()) for i, name in enumerate(ctrl.labels)}
    (out / "marginals.json").write_text(json.dumps(marg, indent=1))
    write_manifest(out, "sample", {"mode": modes[0], "do": do_spec, "cond": cond_spec, "n": n, "seed": seed},
                   {"controller": Path(controller_path), "generator": Path(generator_path) if generator_path else None})
    echo_json({"samples": str(out / "samples.csv"), "marginals": marg})


@cli.command("eval-tvd")
@click.argument("first", type=click.Path(exists=True, dir_okay=False))
@click.argument("second", type=click.Path(exists=True, dir_okay=False))
@click.option("--bins", type=int, default=10, show_default=True, help="Bins per coordinate for real-valued columns.")
@click.option("--out", type=click.Path(file_okay=False))
def eval_tvd_cmd(first, second, bins, out):
    """TVD between two sample files over their shared columns."""
    from .evaluation import empirical_joint, histogram_tvd, tvd
    from .scm import read_dataset

    h1, a = read_dataset(first)
    h2, b = read_dataset(second)
    shared = [c for c in h1 if c in h2]
    if not shared:
        raise SchemaError("the two files share no columns")
    a = a[:, [h1.index(c) for c in shared]]
    b = b[:, [h2.index(c) for c in shared]]
    binary = np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()
    if binary:
        value = tvd(empirical_joint(a.astype(np.int64), shared), empirical_joint(b.astype(np.int64), shared))
    else:
        value = histogram_tvd(a, b, bins)
    result = {"tvd": value, "columns": shared, "method": "joint" if binary else f"histogram{bins}"}
    if out:
        o = outdir(out)
        (o / "tvd.json").write_text(json.dumps(result, indent=1))
        write_manifest(o, "eval-tvd", {"bins": bins}, {"first": Path(first), "second": Path(second)})
    echo_json(result)


@cli.command("report")
@click.option("--controller", "controller_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--metrics", "metrics_path", type=click.Path(exists=True, dir_okay=False),
              help="Training trace to export as a TVD curve.")
@click.option("--pairs", default="Young:Male,Male:Mustache", show_default=True)
@click.option("-n", "n", type=int, default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="cigm-run", show_default=True, type=click.Path(file_okay=False))
def report_cmd(controller_path, data_path, metrics_path, pairs, n, seed, out):
    """Marginal and pairwise tables for a trained controller next to its data."""
    from .controller import load_generator, round_labels
    from .evaluation import (MetricTrace, empirical_joint, format_marginal_table, format_pairwise_table,
                             marginal_report, pairwise_report)

    out = outdir(out)
    ctrl, _ = load_generator(controller_path)
    labels, data = read_labels_file(data_path, derive_seed(seed, "standin"))
    idx = [list(labels).index(name) for name in ctrl.labels]
    data_t = empirical_joint(np.asarray(data)[:, idx].astype(np.int64), ctrl.labels)
    fake = round_labels(ctrl.sample(n, np.random.default_rng(derive_seed(seed, "report"))))
    gen_t = empirical_joint(fake, ctrl.labels)
    marg = {"data": marginal_report(data_t), "generated": marginal_report(gen_t)}
    pair_list = [tuple(p.split(":")) for p in pairs.split(",") if p]
    pw = {p: {"data": pairwise_report(data_t, p), "generated": pairwise_report(gen_t, p)} for p in pair_list}
    text = format_marginal_table(marg, ctrl.labels) + "\n\n" + format_pairwise_table(pw)
    (out / "report.txt").write_text(text + "\n")
    with open(out / "marginals.csv", "w") as fh:
        fh.write("label,data,generated\n")
        for name in ctrl.labels:
            fh.write(f"{name},{marg['data'][name]!r},{marg['generated'][name]!r}\n")
    if metrics_path:
        trace = MetricTrace.read_csv(metrics_path)
        with open(out / "tvd_curve.csv", "w") as fh:
            fh.write("step,tvd\n")
            for s, v in zip(trace.steps(), trace.column("tvd")):
                fh.write(f"{int(s)},{v!r}\n")
    write_manifest(out, "report", {"pairs": pairs, "n": n, "seed": seed},
                   {"controller": Path(controller_path), "data": Path(data_path) if data_path else None,
                    "metrics": Path(metrics_path) if metrics_path else None})
    click.echo(text)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="cigm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        click.echo(json.dumps({"error": "usage_error", "message": exc.format_message()}), err=True)
        return 2
    except click.exceptions.Abort:
        click.echo(json.dumps({"error": "aborted", "message": "aborted"}), err=True)
        return 1
    except FileNotFoundError as exc:
        click.echo(json.dumps({"error": "not_found", "message": str(exc)}), err=True)
        return 1
    except CigmError as exc:
        click.echo(json.dumps({"error": exc.code, "message": str(exc)}), err=True)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
