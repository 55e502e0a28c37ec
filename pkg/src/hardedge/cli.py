"""Command-line harness: one subcommand per experiment.

Every run writes its CSV/JSON artifacts plus ``manifest.json`` (config, config
hash, git revision, wall time, artifact list) into ``--out``.  A JSON config
passed with ``--config`` supplies defaults for the flags; the manifest's
``config`` block is itself a valid config, so re-running it reproduces the
numeric columns exactly.

Exit codes: 0 success, 1 usage error, 2 numerical-diagnostic abort,
3 acceptance failure in ``--check`` mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import rng as _rng

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class CheckFailed(click.ClickException):
    exit_code = EXIT_CHECK


def _numeric_errors():
    from .branching import DomainError
    from .diffusion import DomainExit
    from .env import QuadratureError
    from .matrix import ModelError
    return (QuadratureError, ModelError, DomainExit, DomainError, FloatingPointError)


# ---------------------------------------------------------------------------
# artifacts


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


class Run:
    """Collects artifacts for one subcommand invocation."""

    def __init__(self, command: str, params: dict | None = None):
        self.command = command
        params = click.get_current_context().params if params is None else params
        self.config = {"subcommand": command, **_jsonable(dict(params))}
        self.config.pop("config", None)
        self.out = Path(self.config.pop("out") or Path("out") / command)
        self.config.pop("check", None)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.t0 = time.perf_counter()

    def csv(self, name: str, rows: list[dict]):
        path = self.out / name
        cols = list(rows[0]) if rows else []
        for r in rows:
            cols += [k for k in r if k not in cols]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k, "")) for k in cols})
        self.files.append(name)

    def json(self, name: str, obj):
        with open(self.out / name, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.files.append(name)

    def binary(self, name: str, blob: bytes):
        with open(self.out / name, "wb") as fh:
            fh.write(blob)
        self.files.append(name)

    def finish(self):
        canon = json.dumps(self.config, sort_keys=True).encode()
        manifest = {
            "version": __version__,
            "config": self.config,
            "config_hash": hashlib.sha256(canon).hexdigest(),
            "git_revision": _git_revision(),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "artifacts": self.files,
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(f"wrote {len(self.files)} artifacts to {self.out}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.generic):
        return v.item()
    return v


def _map(fn, items, threads: int):
    """Ordered map, optionally over a process pool (results never depend on it)."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _check(ok: bool, what: str):
    if ok:
        click.echo(f"check passed: {what}")
    else:
        raise CheckFailed(f"check failed: {what}")


# ---------------------------------------------------------------------------
# shared options


def common(*names):
    opts = {
        "n": click.option("--n", type=click.IntRange(min=2), default=64, show_default=True, help="lattice size"),
        "ns": click.option("--n", "ns", type=click.IntRange(min=2), multiple=True, help="lattice sizes (repeatable)"),
        "beta": click.option("--beta", type=float, default=2.0, show_default=True),
        "a": click.option("--a", type=float, default=1.0, show_default=True),
        "t": click.option("--t", type=float, default=0.03, show_default=True, help="experiment time"),
        "seed": click.option("--seed", type=int, default=0, show_default=True),
        "paths": click.option("--paths", type=click.IntRange(min=0), default=200, show_default=True),
        "sub": click.option("--sub", type=int, default=None, help="fine cells per lattice cell [2^19/n]"),
        "cutoff_c": click.option("--cutoff-c", type=float, default=1.0, show_default=True),
        "out": click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory"),
        "threads": click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True),
        "check": click.option("--check", is_flag=True, help="exit 3 unless the acceptance thresholds hold"),
    }

    def deco(f):
        for name in reversed(names + ("out", "check")):
            f = opts[name](f)
        return f
    return deco


def _sub(n: int, sub):
    return sub or max(1, 2**19 // n)


def _env(n, sub, seed, beta, zero_noise=False):
    from .env import GridSpec, sample_environment
    return sample_environment(GridSpec(n, _sub(n, sub), seed), beta, zero_noise)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="JSON file of flag defaults")
@click.version_option(__version__)
@click.pass_context
def cli(ctx, config):
    """Hard-edge Feynman-Kac laboratory."""
    if config:
        with open(config) as fh:
            cfg = json.load(fh)
        cmd = cfg.pop("subcommand", ctx.invoked_subcommand)
        if cmd != ctx.invoked_subcommand:
            raise click.UsageError(f"config is for {cmd!r}, not {ctx.invoked_subcommand!r}")
        ctx.default_map = {cmd: cfg}


# ---------------------------------------------------------------------------
# subcommands


@cli.command("gen-env")
@common("n", "beta", "seed", "sub")
@click.option("--zero-noise", is_flag=True, help="W identically zero")
def gen_env(n, beta, seed, sub, zero_noise, out, check):
    """Sample an environment and write its lattice quantities."""
    run = Run("gen-env")
    env = _env(n, sub, seed, beta, zero_noise)
    run.binary("environment.bin", env.to_bytes())
    k = np.arange(n + 2)
    run.csv("environment.csv", [
        dict(k=int(j), x=j / n, G=env.G[j], G2=env.G2[j], gamma=env.gamma[j], Iexp=env.Iexp[j], s=env.s[j],
             p=env.p[j], q=env.q[j], r=env.r[j], alpha_minus=env.alpha_minus[j], alpha_plus=env.alpha_plus[j])
        for j in k])
    run.finish()
    if check:
        inner = np.arange(2, n)
        am, ap = env.alpha_minus[inner], env.alpha_plus[inner]
        x = inner / n
        _check(bool(np.all((x - 1 / n < am) & (am < x) & (x < ap) & (ap < x + 1 / n))), "interval endpoints ordered")


@cli.command()
@common("n", "beta", "a", "t", "seed", "paths", "sub", "cutoff_c")
@click.option("--k0", type=int, default=None, help="start site [n/2]")
def simulate(n, beta, a, t, seed, paths, sub, cutoff_c, k0, out, check):
    """Run chain paths and record Phi_n, events and jump counts."""
    from .chain import path_stream, simulate as run_chain
    run = Run("simulate")
    env = _env(n, sub, seed, beta)
    k0 = k0 or n // 2
    m = max(1, int(4 * t * n * n))
    rows = []
    for pid in range(paths):
        path, jc, acc = run_chain(env, k0, m, path_stream(seed, pid))
        rows.append(dict(path_id=pid, k0=k0, m=m, final=int(path.positions[-1]), kmin=int(path.positions.min()),
                         absorbed_at=path.absorbed_at, event_E=path.event_E, cutoff=path.event_cutoff(cutoff_c),
                         phiA=acc.phiA, phiB=acc.phiB, phi=acc.phi(a), max_D=int(jc.D.max())))
    run.csv("paths.csv", rows)
    run.finish()


def _fk_task(args):
    from . import fk
    env_args, a, k, m, v, mode, paths, seed = args
    env = _env(*env_args)
    inst = fk.FkInstance.make(env, a, k, m, v, fk.EXACT if mode == "enumeration" else mode)
    return fk.verify(inst, 0 if mode == "enumeration" else paths, seed).row()


@cli.command("fk-verify")
@common("n", "beta", "a", "seed", "paths", "sub", "threads")
@click.option("--m", type=int, default=6, show_default=True, help="number of steps")
@click.option("--mode", type=click.Choice(["exact", "common", "enumeration"]), default="exact", show_default=True)
@click.option("--vectors", type=int, default=1, show_default=True, help="random test vectors")
@click.option("--k0", type=int, default=None, help="start site; all sites when omitted and enumerating")
def fk_verify(n, beta, a, seed, paths, sub, threads, m, mode, vectors, k0, out, check):
    """Compare path sums or Monte-Carlo estimates with matrix powers.

    Exact mode enumerates every lattice path when 3^m is small enough and
    otherwise runs ``--paths`` Monte-Carlo paths.
    """
    from .fk import ENUMERATION_CAP
    run = Run("fk-verify")
    sub = sub or 64
    if mode == "exact" and 3**m <= ENUMERATION_CAP:
        mode = "enumeration"
    sites = [k0] if k0 else (list(range(1, n + 1)) if mode == "enumeration" else [n // 2])
    tasks = []
    for i in range(vectors):
        v = _rng.stream(seed, _rng.AUX, 1, n, m, i).uniform(0.1, 1.0, n)
        tasks += [((n, sub, seed, beta), a, k, m, v, mode, paths, seed * 100 + i) for k in sites]
    rows = _map(_fk_task, tasks, threads)
    for r, tk in zip(rows, tasks):
        r["vector"] = tasks.index(tk) // len(sites)
        r["rel_err"] = abs(r["estimate"] - r["matrix_value"]) / abs(r["matrix_value"])
    run.csv("fk.csv", rows)
    run.finish()
    if mode == "enumeration":
        worst = max(r["rel_err"] for r in rows)
        click.echo(f"max relative error {worst:.3g}")
        if check:
            _check(worst <= 1e-12, f"path sum equals matrix power (max rel err {worst:.3g})")
    else:
        worst = max(abs(r["z_score"]) for r in rows)
        click.echo(f"max |z| {worst:.3g}")
        if check:
            _check(mode != "exact" or worst <= 3, f"Monte-Carlo within 3 standard errors (max |z| {worst:.3g})")


@cli.command()
@common("ns", "beta", "a", "seed", "sub")
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--ref-grid", type=int, default=32768, show_default=True, help="kernel discretization size")
def eigs(ns, beta, a, seed, sub, count, ref_grid, out, check):
    """Smallest eigenvalues of n^2 A against the limiting kernel."""
    from .env import GridSpec, sample_environment
    from .matrix import build_model, limiting_kernel, smallest_eigs
    run = Run("eigs")
    ns = ns or (64, 128, 256, 512)
    big = sample_environment(GridSpec(512, 256, seed), beta)
    ref = limiting_kernel(big, a, ref_grid, count)
    rows = []
    for n in ns:
        model, _ = build_model(_env(n, sub or max(1, 2**17 // n), seed, beta), a)
        res = smallest_eigs(model, count)
        for i in range(count):
            rows.append(dict(n=n, index=i + 1, eigenvalue=res.values[i], residual=res.residuals[i],
                             reference=ref[i], rel_gap=abs(res.values[i] - ref[i]) / ref[i]))
    run.csv("eigs.csv", rows)
    run.finish()
    if check:
        gaps = [r["rel_gap"] for r in rows if r["index"] == 1]
        _check(bool(np.all(np.diff(gaps) < 0) and gaps[-1] <= 0.1), f"hard-edge gaps {np.round(gaps, 4).tolist()}")


def _coupled_task(args):
    from . import diffusion as dif
    ns, sub, seed, beta, cfg, pid = args
    envs = {n: _env(n, sub, seed, beta) for n in ns}
    tables = dif.path_tables(envs[max(ns)], x_min=1.0 / (2.0 * np.log(min(ns))))
    return dif.coupled_rows(envs, tables, cfg, pid, seed)


@cli.command("functional-convergence")
@common("ns", "beta", "a", "t", "seed", "paths", "sub", "cutoff_c", "threads")
@click.option("--x0", type=float, default=0.5, show_default=True)
@click.option("--delta", type=float, default=4e-7, show_default=True, help="driving-motion step")
def functional_convergence(ns, beta, a, t, seed, paths, sub, cutoff_c, threads, x0, delta, out, check):
    """Coupled diffusion and chains: Phi against Phi_n and jump-time gaps."""
    from . import diffusion as dif
    run = Run("functional-convergence")
    ns = tuple(sorted(ns or (32, 64, 128)))
    cfg = dif.CoupledConfig(t=t, a=a, x0=x0, delta=delta, cutoff_c=cutoff_c)
    chunks = np.array_split(np.arange(paths), max(1, threads))
    parts = _map(_coupled_task, [(ns, sub, seed, beta, cfg, c.tolist()) for c in chunks if c.size], threads)
    rows = [r for p in parts for r in p]
    run.csv("coupled.csv", rows)
    summary = {}
    for ka, kb in (("phi", "phi_n"), ("phiA", "phiA_n"), ("phiB", "phiB_n")):
        med = dif.summarize(rows, ka, kb)
        summary[ka] = {"median_gap": {n: med[n][0] for n in ns}, "count": {n: med[n][1] for n in ns},
                       "slope": dif.fit_slope(ns, [med[n][0] for n in ns])}
    tau = []
    for n in ns:
        v = [r["tau_gap"] for r in rows if r["n"] == n and r.get("alive") and r.get("cutoff")
             and r["max_D"] <= r["jump_bound"]]
        tau.append(float(np.median(v)) if v else float("nan"))
    summary["tau_gap_median"] = dict(zip(ns, tau))
    run.json("summary.json", summary)
    run.finish()
    click.echo(json.dumps(_jsonable({k: v["slope"] for k, v in summary.items() if "slope" in v})))
    if check:
        ok = (summary["phi"]["slope"] <= -0.2 and summary["phiA"]["slope"] <= -0.8
              and bool(np.all(np.diff(tau) < 0)))
        _check(ok, "functional slopes and jump-time gaps")


@cli.command("branching-check")
@common("n", "beta", "seed", "paths", "sub")
@click.option("--k0", type=int, default=None, help="start site [3n/4]")
@click.option("--target", type=int, default=None, help="site k' [3n/4]")
@click.option("--visits", type=int, default=3, show_default=True)
@click.option("--lam", type=float, multiple=True, help="MGF arguments [0.1, -0.1]")
@click.option("--tail-n", type=int, default=1024, show_default=True, help="lattice size for tail windows")
def branching_check(n, beta, seed, paths, sub, k0, target, visits, lam, tail_n, out, check):
    """Conditional laws, generating function and lower tail of jump counts."""
    from . import branching as br
    run = Run("branching-check")
    env = _env(n, sub or 64, seed, beta)
    target = target or (3 * n) // 4
    k0 = k0 or target
    paths = max(paths, 1000)
    obs = br.collect(env, k0, target, visits, paths, seed)
    rows = []
    for k in range(max(1, target - 8), target):
        counts = np.bincount(obs.D[:, k + 1])
        for D in range(counts.size):
            if counts[D] >= 200 and D + obs.d_bits()[k] > 0:
                c = br.chi_square_cell(obs, env, k, D)
                rows.append(dict(k=k, D=D, samples=c.samples, statistic=c.statistic, dof=c.dof, p_value=c.p_value))
    run.csv("chi_square.csv", rows)
    mg = []
    if k0 >= target:
        for lm in lam or (0.1, -0.1):
            for k in (target - 1, target - 4):
                r = br.mgf_check(obs, env, k, lm, seed)
                mg.append(dict(k=k, target=target, lam=lm, samples=r.samples, empirical=r.empirical,
                               stderr=r.stderr, z=r.z))
        run.csv("mgf.csv", mg)
    big = _env(tail_n, 4, seed, beta)
    tails = br.tail_check(big, br.find_windows(big, min_len=60), seed=seed)
    run.csv("tails.csv", [t.__dict__ for t in tails])
    run.finish()
    if check:
        ok = (all(r["p_value"] > 0.001 for r in rows) and all(abs(r["z"]) <= 4 for r in mg)
              and all(t.frequency <= t.bound for t in tails if t.qualifies))
        _check(ok, "branching laws")


def _transition_task(args):
    from . import transition as tr
    seed, rep, cfg = args
    return tr.sweep_replicate(seed, rep, cfg)


@cli.command("edge-transition")
@common("beta", "seed", "threads")
@click.option("--z", type=float, default=1.0, show_default=True)
@click.option("--t", type=float, default=0.25, show_default=True, help="rescaled time")
@click.option("--alpha", "alphas", type=float, multiple=True, help="alpha grid [4 8 16 32 64]")
@click.option("--replicates", type=int, default=50, show_default=True)
def edge_transition(beta, seed, threads, z, t, alphas, replicates, out, check):
    """Hard-to-soft edge sweep over alpha on shared (B, W) pairs."""
    from . import transition as tr
    run = Run("edge-transition")
    cfg = tr.TransitionConfig(z=z, t=t, beta=beta, alphas=tuple(alphas) or tr.DEFAULT_ALPHAS)
    parts = _map(_transition_task, [(seed, r, cfg) for r in range(replicates)], threads)
    rows = [r for p in parts for r in p]
    cols = ["alpha", "z", "t", "traj_gap", "functional_gap", "scale_gap", "clock_gap", "replicate_id"]
    run.csv("transition.csv", [{**{c: r[c] for c in cols}, **r} for r in rows])
    summary = tr.summarize(rows, cfg.alphas)
    run.json("slopes.json", summary.as_dict())
    run.finish()
    click.echo(json.dumps(_jsonable(summary.slopes)))
    if check:
        ok = (all(summary.slopes[g] <= -0.2 for g in ("traj_gap", "scale_gap", "clock_gap"))
              and summary.decreasing_fraction >= 0.8)
        _check(ok, "edge-transition slopes")


@cli.command()
@click.option("--only", type=int, multiple=True, help="criterion numbers to run [all]")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def check(only, out):
    """Run the acceptance suite; exit 3 if any criterion fails."""
    from . import acceptance
    run = Run("check", {"only": list(only), "out": out})
    results = [c() for c in acceptance.ALL if not only or acceptance.ALL.index(c) + 1 in only]
    for r in results:
        click.echo(r.line())
    run.json("acceptance.json", [dict(number=r.number, name=r.name, passed=r.passed, seconds=r.seconds,
                                      details=r.details) for r in results])
    run.finish()
    failed = [r.number for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"criteria failed: {failed}")


@cli.command("run")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory")
@click.pass_context
def run_config(ctx, config, out):
    """Run the subcommand named in a config (or manifest) file."""
    with open(config) as fh:
        cfg = json.load(fh)
    cfg = cfg.get("config", cfg)
    name = cfg.pop("subcommand", None)
    cmd = cli.get_command(ctx, name) if name else None
    if cmd is None or name == "run":
        raise click.UsageError(f"config names no runnable subcommand ({name!r})")
    known = {p.name for p in cmd.params}
    extra = set(cfg) - known
    if extra:
        raise click.UsageError(f"unknown keys for {name}: {sorted(extra)}")
    if out:
        cfg["out"] = out
    sub = cmd.make_context(name, [], parent=ctx, default_map=cfg)
    with sub:
        cmd.invoke(sub)


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="hardedge", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except CheckFailed as e:
        e.show()
        return EXIT_CHECK
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except _numeric_errors() as e:
        click.echo(f"numerical diagnostic: {type(e).__name__}: {e}", err=True)
        return EXIT_NUMERIC
    except ValueError as e:  # precondition violated by the configuration
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
