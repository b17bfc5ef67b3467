"""Command-line entry point (``eventlf``).

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime failures
(``report`` still writes its partial report before exiting with 3).
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import aperture
from .aperture import ApertureSchedule
from .errors import ConfigError, EventLFError
from .harness import (ExperimentConfig, build_schedule, run_experiment, scene_from_dict, segment_stream,
                      tau_sweep, write_curve_csv)
from .lfcore import load_lightfield, quality_report, save_image, save_lightfield, synthetic_suite
from .patopt import EventBudget, OptConfig, anneal
from .recon import ReconConfig, image_only_recon, recon_from_measurement, recovered_coded_images
from .sensor import (EventStream, Measurement, SensorConfig, TimingConfig, simulate_event_stream,
                     simulate_exposure, write_stack)

log = logging.getLogger("eventlf")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class RuntimeFailure(EventLFError):
    """Raised by subcommands that finished with recorded failures."""


class Context:
    def __init__(self, config_path, seed, out, workers):
        self.config_path = config_path
        self.seed = seed
        self.out = Path(out)
        self.workers = workers
        self._config = None

    @property
    def config(self) -> ExperimentConfig | None:
        if self._config is None and self.config_path is not None:
            cfg = ExperimentConfig.load(self.config_path)
            if self.seed is not None:
                cfg = replace(cfg, rng_seed=self.seed, sensor=replace(cfg.sensor, rng_seed=self.seed))
            if self.workers is not None:
                cfg = replace(cfg, workers=self.workers)
            self._config = cfg
        return self._config

    def require_config(self) -> ExperimentConfig:
        if self.config is None:
            raise ConfigError("this command needs --config")
        return self.config

    @property
    def rng_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        return self.config.rng_seed if self.config is not None else 0

    def sensor(self, tau=None) -> SensorConfig:
        base = self.config.sensor if self.config is not None else SensorConfig()
        base = replace(base, rng_seed=self.rng_seed)
        return base if tau is None else base.with_tau(tau)

    def recon(self) -> ReconConfig:
        return self.config.recon if self.config is not None else ReconConfig()

    def scenes(self, scene_dirs=()):
        if scene_dirs:
            return [load_lightfield(d) for d in scene_dirs]
        return [scene_from_dict(s) for s in self.require_config().scenes]

    def schedule(self, path=None, scenes=None) -> ApertureSchedule:
        if path is not None:
            return ApertureSchedule.load(path)
        if self.config is not None:
            return build_schedule(self.config, scenes)
        return aperture.random_schedule(self.rng_seed)

    def outdir(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out


pass_ctx = click.make_pass_decorator(Context)


def _floats(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment config.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Overrides the config rng_seed.")
@click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--workers", type=click.IntRange(1), default=None, help="Parallel scene x tau jobs.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config_path, seed, out, workers, verbose):
    """Coded-aperture event-camera light-field toolkit."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Context(config_path, seed, out, workers)


@cli.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True, file_okay=False),
              help="Light-field directory; defaults to the first config scene.")
@click.option("--schedule", "schedule_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", type=float, default=0.15, show_default=True)
@click.option("--cycles", type=click.IntRange(1), default=1, show_default=True, help="Exposure cycles in events.csv.")
@click.option("--continuous", is_flag=True, help="Store unquantized event stacks.")
@pass_ctx
def simulate(c: Context, scene_dir, schedule_path, tau, cycles, continuous):
    """Simulate one exposure: frame, event stacks and a timestamped event stream."""
    lf = c.scenes([scene_dir] if scene_dir else ())[0]
    sched = c.schedule(schedule_path, [lf])
    sensor = c.sensor(tau)
    m = simulate_exposure(lf, sched, sensor, quantized=not continuous)
    out = c.outdir()
    m.save(out / "measurement.npz")
    sched.save(out / "schedule.json")
    save_image(np.clip(m.frame / (m.scale * sched.n), 0, 1), out / "frame.png")
    if not continuous:
        for k, s in enumerate(m.stacks, start=1):
            write_stack(s, out / f"stack_{k}_{k + 1}.bin")
        stream = simulate_event_stream(lf, sched, TimingConfig(n_patterns=sched.n), sensor, cycles, m)
        stream.to_csv(out / "events.csv")
    click.echo(json.dumps({"n_event": m.n_event, "tau": tau, "out": str(out)}))


@cli.command()
@click.option("--measurement", "meas_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", type=float, default=None, help="Contrast threshold; defaults to the stored value.")
@click.option("--epsilon", type=float, default=0.01, show_default=True)
@pass_ctx
def invert(c: Context, meas_path, tau, epsilon):
    """Recover the N coded-aperture images from a stored measurement."""
    m = Measurement.load(meas_path)
    images = recovered_coded_images(m, tau, epsilon)
    out = c.outdir()
    np.save(out / "coded_images.npy", images)
    for n, img in enumerate(images, start=1):
        save_image(np.clip(img / m.scale, 0, 1), out / f"coded_{n}.png")
    click.echo(json.dumps({"images": int(images.shape[0]), "out": str(out)}))


@cli.command()
@click.option("--measurement", "meas_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schedule", "schedule_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", type=float, default=None)
@click.option("--epsilon", type=float, default=0.01, show_default=True)
@click.option("--method", type=click.Choice(["ours", "image_only"]), default="ours", show_default=True)
@click.option("--reference", type=click.Path(exists=True, file_okay=False), help="Ground-truth light field.")
@pass_ctx
def reconstruct(c: Context, meas_path, schedule_path, tau, epsilon, method, reference):
    """Reconstruct a light field from a stored measurement."""
    m = Measurement.load(meas_path)
    sched = ApertureSchedule.load(schedule_path)
    if method == "ours":
        lf = recon_from_measurement(m, sched, tau, c.recon(), epsilon=epsilon)
    else:
        lf = image_only_recon(m.frame, sched, c.recon())
    out = c.outdir()
    save_lightfield(lf, out / "lightfield")
    result = {"method": method, "out": str(out / "lightfield")}
    if reference:
        q = quality_report(load_lightfield(reference), lf)
        result.update(psnr_db=q.psnr, psnr_global_db=q.psnr_global, ssim=q.ssim)
    click.echo(json.dumps(result))


@cli.command()
@click.option("--iterations", type=click.IntRange(0), default=200, show_default=True)
@click.option("--t0", "initial_temperature", type=float, default=1e-4, show_default=True)
@click.option("--cooling", type=float, default=0.98, show_default=True)
@click.option("--budget-lambda", type=float, default=1e-5, show_default=True)
@click.option("--budget-theta", type=float, default=131_130, show_default=True,
              help="Event threshold per 16x64x64 pixels; rescaled to the training set.")
@click.option("--n-scenes", type=click.IntRange(1), default=4, show_default=True,
              help="Synthetic training scenes when no config is given.")
@click.option("--size", type=click.IntRange(16), default=24, show_default=True)
@pass_ctx
def optimize(c: Context, iterations, initial_temperature, cooling, budget_lambda, budget_theta, n_scenes, size):
    """Anneal a binary complementary schedule on training scenes."""
    scenes = c.scenes() if c.config is not None else synthetic_suite(n_scenes, size, seed=c.rng_seed)
    cfg = OptConfig(iterations=iterations, initial_temperature=initial_temperature, cooling_rate=cooling,
                    scenes=scenes, rng_seed=c.rng_seed, sensor=c.sensor())
    budget = EventBudget(lam=budget_lambda, theta=budget_theta)
    res = anneal(aperture.random_schedule(c.rng_seed), cfg, budget)
    out = c.outdir()
    res.schedule.save(out / "schedule.json")
    res.write_trace(out / "anneal_trace.csv")
    click.echo(json.dumps({
        "objective": res.best.objective, "mse": res.best.mse, "n_event": res.best.n_event,
        "theta_scaled": res.best.theta, "penalty": res.best.penalty, "out": str(out / "schedule.json"),
    }))


@cli.command()
@click.option("--events", "events_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--shape", nargs=2, type=int, required=True, help="Sensor size X Y.")
@click.option("--n-patterns", type=click.IntRange(2), default=4, show_default=True)
@click.option("--t-c", type=float, default=5.434, show_default=True, help="Pattern slot in ms.")
@click.option("--transient", type=float, default=0.5, show_default=True, help="Transient window in ms.")
@click.option("--bin-us", type=click.IntRange(1), default=100, show_default=True)
@click.option("--open-factor", type=float, default=5.0, show_default=True)
@click.option("--close-factor", type=float, default=2.0, show_default=True)
@click.option("--t-end-us", type=int, default=None,
              help="Recording end; defaults to the last event, so a trailing silent transition reads as incomplete.")
@pass_ctx
def segment(c: Context, events_path, shape, n_patterns, t_c, transient, bin_us, open_factor, close_factor, t_end_us):
    """Split an event CSV into per-transition event stacks."""
    stream = EventStream.from_csv(events_path, shape=tuple(shape), t_end_us=t_end_us)
    timing = TimingConfig(t_c=t_c, n_patterns=n_patterns, transient=transient)
    seg = segment_stream(stream, timing, tuple(shape), bin_us=bin_us, open_factor=open_factor,
                         close_factor=close_factor)
    out = c.outdir()
    for ci in range(seg.n_cycles):
        for k in range(n_patterns - 1):
            write_stack(seg.stacks[ci, k], out / f"stack_c{ci + 1}_{k + 1}_{k + 2}.bin")
    with open(out / "windows.csv", "w") as fh:
        fh.write("start_us,end_us\n")
        fh.writelines(f"{s},{e}\n" for s, e in seg.windows_us)
    click.echo(json.dumps({"cycles": seg.n_cycles, "bursts": len(seg.windows_us), "out": str(out)}))


@cli.command()
@click.option("--taus", default=None, help="Comma-separated tau list; defaults to the config taus.")
@click.option("--continuous", is_flag=True, help="Use unquantized events.")
@pass_ctx
def sweep(c: Context, taus, continuous):
    """Mean PSNR against the contrast threshold; writes curve.csv."""
    cfg = c.require_config()
    tau_list = _floats(taus) if taus is not None else cfg.taus
    scenes = c.scenes()
    sched = build_schedule(cfg, scenes)
    curve = tau_sweep(scenes, sched, tau_list, c.sensor(), cfg.recon, quantized=not continuous)
    out = c.outdir()
    click.echo(write_curve_csv(curve, out / "curve.csv"), nl=False)


@cli.command()
@pass_ctx
def report(c: Context):
    """Run the configured scene x tau evaluation and write report.json / report.csv."""
    cfg = c.require_config()
    rep = run_experiment(cfg, c.outdir())
    click.echo(f"{len(rep.rows)} rows, {len(rep.failed)} failed -> {c.out}")
    if rep.failed:
        raise RuntimeFailure(f"{len(rep.failed)} jobs failed; see report.json")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="eventlf", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:  # any runtime failure maps to one exit code
        log.debug("failure", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
