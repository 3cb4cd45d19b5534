"""Command line front end for trials, sweeps, figure data and theory tables."""

from __future__ import annotations

import json
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import click
import numpy as np

from .decision import theoretical_detection_errors
from .harness import (ExperimentConfig, FIGURE_IDS, aggregate, load_scenario,
                      run_many, run_sweep, theoretical_cer, trial_seeds,
                      write_csv, write_manifest)
from .theory import asymptotic_pmd_pfa, state_evolution, theoretical_p2


def _config(config_path, seed):
    cfg = load_scenario(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = replace(cfg, base_seed=seed)
    return cfg


def _apply_mode(cfg, mode):
    if not mode:
        return cfg
    parts = mode.split(":")
    cfg = replace(cfg, decision_mode=parts[0] or cfg.decision_mode)
    if len(parts) > 1 and parts[1]:
        cfg = replace(cfg, stitch_mode=parts[1])
    return cfg


@click.group()
def main():
    """Simulator, decoder and theory tools for uncoupled unsourced access."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--mode", default=None,
              help="decision[:stitch] modes, e.g. r_norm:argmax")
@click.option("--genie-priors", is_flag=True)
@click.option("--genie-ka", is_flag=True)
def trial(config_path, seed, out, mode, genie_priors, genie_ka):
    """Run one end-to-end trial and print its metrics as JSON."""
    cfg = _apply_mode(_config(config_path, seed), mode)
    cfg = replace(cfg, genie_priors=genie_priors or cfg.genie_priors,
                  genie_ka=genie_ka or cfg.genie_ka)
    from .harness import run_trial
    m = run_trial(cfg, cfg.base_seed)
    payload = {k: v for k, v in vars(m).items()
               if k not in ("nmse_trace", "rel_traces", "label_trace",
                            "detector_iters")}
    payload["detector_iters"] = list(m.detector_iters)
    text = json.dumps(payload, indent=2, default=float)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "trial.json").write_text(text)
        write_manifest(out, cfg, [cfg.base_seed], m.wall_time)
    click.echo(text)
    sys.exit(0 if m.detector_converged else 1)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--axis", type=click.Choice(["snr_db", "M", "K_a"]),
              required=True)
@click.option("--values", required=True, help="comma separated axis values")
@click.option("--trials", type=int, default=50)
@click.option("--out", type=click.Path(), required=True)
@click.option("--mode", default=None)
@click.option("--parallel", type=int, default=1)
@click.option("--theory/--no-theory", default=False)
def sweep(config_path, seed, axis, values, trials, out, mode, parallel, theory):
    """Sweep one parameter axis and write aggregated metrics to CSV."""
    cfg = _apply_mode(_config(config_path, seed), mode)
    if theory:
        cfg = replace(cfg, with_theory=True)
    vals = [float(v) for v in values.split(",")]
    t0 = time.perf_counter()
    rows = run_sweep(cfg, axis, vals, trials, parallel)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"sweep_{axis}.csv"
    write_csv(rows, path)
    write_manifest(out_dir, cfg, trial_seeds(cfg.base_seed, 0, trials),
                   time.perf_counter() - t0)
    click.echo(f"wrote {path}")


@main.command()
@click.argument("fig_id", type=click.Choice(FIGURE_IDS))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--parallel", type=int, default=1)
def figure(fig_id, config_path, seed, trials, out, parallel):
    """Regenerate the data series behind one simulation figure."""
    from .harness import reproduce_figure
    cfg = _config(config_path, seed)
    path = reproduce_figure(fig_id, cfg, out, trials=trials, parallel=parallel)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--snr-values", default=None,
              help="comma separated SNR points (dB); default: config value")
@click.option("--out", type=click.Path(), default=None)
def theory(config_path, seed, snr_values, out):
    """Closed-form predictions (state evolution limit, detection errors,
    asymptotics, composed joint error) for the configured system."""
    from .channel import calibrate_power, draw_topology

    cfg = _config(config_path, seed)
    snrs = ([float(v) for v in snr_values.split(",")]
            if snr_values else [cfg.min_snr_db])
    topology = draw_topology(cfg.K_tot, cfg.K_a, cfg.base_seed)
    eps = cfg.K_a / 2.0 ** cfg.J
    rows = []
    for snr in snrs:
        budget = calibrate_power(topology, cfg.n0, cfg.N0_dbm, snr)
        se = state_evolution(budget.sigma2, eps, topology.active_gains,
                             cfg.n0, cfg.J, T=200)
        det = theoretical_detection_errors(cfg.M, se.u_limit,
                                           topology.active_gains,
                                           cfg.K_a, cfg.J)
        alpha = 2.0 * det.a / cfg.M
        beta = 2.0 * det.b / cfg.M
        pmd_as, pfa_as = asymptotic_pmd_pfa(cfg.M, alpha, beta)
        cer = theoretical_cer(topology.active_gains, se.v[-1], cfg.M,
                              seed=cfg.base_seed)
        rows.append({
            "value": snr, "sigma2": budget.sigma2, "u_limit": se.u_limit,
            "p_md_bar": det.p_md_bar, "p_fa_bar": det.p_fa_bar,
            "p1": det.p1, "tau_mean": float(np.mean(det.tau)),
            "p_md_asymptotic": float(np.mean(pmd_as)),
            "p_fa_asymptotic": float(np.mean(pfa_as)),
            "cer": cer,
            "p2": theoretical_p2(cfg.K_a, cfg.J, det.p_md_bar,
                                 det.p_fa_bar, cer),
        })
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out_dir / "theory.csv")
        click.echo(f"wrote {out_dir / 'theory.csv'}")
    else:
        click.echo(json.dumps(rows, indent=2))


@main.command("show-config")
@click.option("--config", "config_path", type=click.Path(exists=True))
def show_config(config_path):
    """Print the effective configuration (defaults merged with the file)."""
    cfg = _config(config_path, None)
    click.echo(json.dumps({f.name: getattr(cfg, f.name) for f in fields(cfg)},
                          indent=2))


if __name__ == "__main__":
    main()
