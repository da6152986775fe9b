"""Command-line pipeline: ``simulate``, ``register``, ``reconstruct``, ``evaluate``.

Every stage reads an optional ``key = value`` config file, applies ``--seed``
and ``--threads``, writes its outputs into ``--output-dir`` and finishes with
``manifest_<stage>.txt`` holding the full effective configuration and the
SHA-256 of every input and output file.

Exit status: 0 on success, 1 on invalid input (bad flags, bad config, missing
files), 2 on I/O failure (unreadable or unwritable files).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

from . import __version__
from .baseline import interpolate_3d_baseline, raw_series
from .errors import InvalidParameterError, NiftiError, UndefinedMetricError
from .geometry import Grid4D
from .metrics import TABLE_COLUMNS, evaluate
from .nifti import read_nifti, read_nifti_array, write_nifti, write_nifti_array
from .psf import PsfParams
from .registration import RegistrationConfig, register_pipeline
from .sidecar import (
    apply_motion,
    read_key_values,
    read_motion_csv,
    read_sidecar,
    sha256_file,
    write_key_values,
    write_motion_csv,
    write_report_csv,
    write_sidecar,
    write_table_csv,
)
from .simulator import PhantomSpec, TrajectorySpec, simulate_series
from .solver import ReconConfig, reconstruct

__all__ = ["main", "DEFAULTS"]

log = logging.getLogger("recon4d")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

# Desk-scale defaults; motion maxima follow the largest-motion subject regime.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "grid.dims": (64, 64, 24, 32),
    "grid.spacing": (1.74, 1.74, 3.0),
    "grid.tr": 2.0,
    "phantom.kind": "nested-ellipsoids",
    "phantom.amplitude": 0.02,
    "phantom.period": 20.0,
    "motion.max_translation": (11.9, 3.0, 3.2),
    "motion.max_rotation": (4.2, 27.9, 7.7),
    "motion.style": "mixed",
    "motion.drift_fraction": 0.3,
    "acquisition.noise_sigma": 2.0,
    "acquisition.interleave": 2,
    "acquisition.fine_factor": 2,
    "mask.dilation": 2,
    **{k: v for k, v in RegistrationConfig().as_config().items()},
    **{k: v for k, v in ReconConfig().as_config().items()},
}
PSF_KEYS = tuple(PsfParams(1, 1, 1, 1, 1).as_config())
ALLOWED = set(DEFAULTS) | set(PSF_KEYS)

STAGE_KEYS = {
    "simulate": ("seed", "grid.", "phantom.", "motion.", "acquisition.", "mask.", "psf."),
    "register": ("registration.", "psf."),
    "reconstruct": ("solver.", "psf."),
    "evaluate": (),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit status 1 (not 2) on usage errors."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- config


class Settings:
    """Defaults overlaid with a config file; values coerced to the default's type."""

    def __init__(self, overrides: Mapping[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in ALLOWED:
                raise InvalidParameterError(f"unknown config key {key!r}")
            self.values[key] = self._coerce(key, value)

    @staticmethod
    def _coerce(key: str, value: object) -> object:
        default = DEFAULTS.get(key, 1.0)
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ValueError
                return value
            if isinstance(default, tuple):
                items = value if isinstance(value, tuple) else (value,)
                if len(items) != len(default):
                    raise ValueError
                kind = type(default[0])
                if kind is int and any(isinstance(v, float) and not float(v).is_integer() for v in items):
                    raise ValueError
                return tuple(kind(v) for v in items)
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                if isinstance(value, (bool, str, tuple)):
                    raise ValueError
                return int(value)
            if isinstance(default, float):
                if isinstance(value, (bool, str, tuple)):
                    raise ValueError
                return float(value)
            return str(value)
        except (TypeError, ValueError):
            raise InvalidParameterError(f"config key {key!r}: invalid value {value!r}") from None

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, stage: str) -> dict[str, object]:
        prefixes = STAGE_KEYS[stage]
        return {k: v for k, v in self.values.items() if any(k == p or k.startswith(p) for p in prefixes)}

    def psf(self, grid: Grid4D) -> PsfParams:
        base = PsfParams.for_grid(grid)
        changes = {k.split(".", 1)[1]: float(self.values[k]) for k in PSF_KEYS if k in self.values}
        return base.replace(**changes) if changes else base

    def registration(self) -> RegistrationConfig:
        v = self.values
        return RegistrationConfig(
            pyramid_levels=v["registration.pyramid_levels"],
            max_eval=v["registration.max_eval"],
            interleave_factor=v["registration.interleave_factor"],
            quiescence_window=v["registration.quiescence_window"],
            metric=v["registration.metric"],
            initial_step=v["registration.initial_step"],
            final_step=v["registration.final_step"],
            min_coverage=v["registration.min_coverage"],
            min_score=v["registration.min_score"],
        )

    def solver(self) -> ReconConfig:
        v = self.values
        return ReconConfig(
            alpha=v["solver.alpha"],
            max_iters=v["solver.max_iters"],
            tol=v["solver.tol"],
            solver_kind=v["solver.kind"],
            step_size=v["solver.step_size"],
            init_kind=v["solver.init"],
            precondition=v["solver.precondition"],
        )


# ---------------------------------------------------------------------- utils


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _input(args, name: str, default: str) -> Path:
    given = getattr(args, name, None)
    if given:
        return Path(given)
    return Path(args.input_dir or args.output_dir) / default


class Run:
    """Bookkeeping for one stage: effective config, inputs and outputs."""

    def __init__(self, stage: str, args, settings: Settings):
        self.stage = stage
        self.args = args
        self.settings = settings
        self.out = Path(args.output_dir)
        self.config: dict[str, object] = settings.section(stage)
        self.inputs: dict[str, Path] = {}
        self.outputs: list[str] = []

    def add_input(self, name: str, path: Path) -> Path:
        self.inputs[name] = path
        return path

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self, extra: Mapping[str, object] | None = None) -> Path:
        entries: dict[str, object] = {
            "stage": self.stage,
            "version": __version__,
            "seed": self.settings["seed"],
            "threads": self.args.threads,
            "units.length": "mm",
            "units.time": "s",
            "units.angle": "deg",
        }
        entries.update({f"config.{k}": v for k, v in self.config.items()})
        for name, path in self.inputs.items():
            entries[f"input.{name}.path"] = os.path.relpath(path, self.out)
            entries[f"input.{name}.sha256"] = sha256_file(path)
        for name in self.outputs:
            entries[f"output.{name}.sha256"] = sha256_file(self.out / name)
        entries.update(extra or {})
        path = self.out / f"manifest_{self.stage}.txt"
        write_key_values(path, entries, header=f"recon4d {self.stage} manifest")
        return path


def _stack_grid(shape, header, nz: int, nt: int) -> Grid4D:
    pixdim = header["pixdim"]
    spacing = tuple(float(p) for p in pixdim[1:4])
    origin = (float(header["qoffset_x"]), float(header["qoffset_y"]), float(header["qoffset_z"]))
    return Grid4D((int(shape[0]), int(shape[1]), nz, nt), spacing, float(pixdim[4]), origin)


def _load_slices(stack_path: Path, sidecar_path: Path):
    """Slices and the grid they were acquired on (inferred from stack + sidecar)."""
    stack, header = read_nifti_array(stack_path)
    if stack.ndim == 3:
        stack = stack[:, :, :, None]
    if stack.ndim != 4:
        raise InvalidParameterError(f"{stack_path}: slice stack must be 4D, got {stack.ndim}D")
    with open(sidecar_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidParameterError(f"{sidecar_path}: no slices listed")
    try:
        nz = max(int(r["slice_index"]) for r in rows) + 1
        nt = max(int(r["volume_index"]) for r in rows) + 1
    except (KeyError, ValueError):
        raise InvalidParameterError(f"{sidecar_path}: malformed slice_index/volume_index columns") from None
    grid = _stack_grid(stack.shape, header, nz, nt)
    slices = read_sidecar(sidecar_path, stack, grid.spacing[:2], grid.spacing[2], grid.origin, grid.center)
    return slices, grid


def _write_slices(run: Run, slices, grid: Grid4D, stack_name: str | None, sidecar_name: str) -> None:
    if stack_name is not None:
        stack = np.stack([s.data for s in slices], axis=-1)[:, :, None, :]
        write_nifti_array(run.output(stack_name), stack, grid.spacing, grid.tr, grid.origin)
    write_sidecar(run.output(sidecar_name), slices)


def _load_mask(path: Path, shape) -> np.ndarray:
    vol = read_nifti(path)
    mask = vol.data[..., 0] > 0.5
    if mask.shape != tuple(shape):
        raise InvalidParameterError(f"{path}: mask shape {mask.shape} does not match grid {tuple(shape)}")
    return mask


def _mask_to_nifti(path: Path, mask: np.ndarray, grid: Grid4D) -> None:
    write_nifti_array(path, mask.astype(np.int16), grid.spacing, grid.tr, grid.origin, dtype="int16")


# ------------------------------------------------------------------- commands


def cmd_simulate(args, settings: Settings) -> dict[str, object]:
    run = Run("simulate", args, settings)
    s = settings
    grid = Grid4D(s["grid.dims"], s["grid.spacing"], s["grid.tr"])
    seed = s["seed"]
    phantom = PhantomSpec(grid=grid, kind=s["phantom.kind"], amplitude=s["phantom.amplitude"],
                          period=s["phantom.period"], seed=seed)
    trajectory = TrajectorySpec(s["motion.max_translation"], s["motion.max_rotation"], style=s["motion.style"],
                                seed=seed, drift_fraction=s["motion.drift_fraction"])
    psf = s.psf(grid)
    sim = simulate_series(phantom, trajectory, noise_sigma=s["acquisition.noise_sigma"],
                          interleave=s["acquisition.interleave"], psf=psf,
                          fine_factor=s["acquisition.fine_factor"], mask_dilation=s["mask.dilation"], seed=seed)
    run.config.update(psf.as_config())
    run.out.mkdir(parents=True, exist_ok=True)
    write_nifti(sim.truth, run.output("truth.nii"))
    _mask_to_nifti(run.output("mask.nii"), sim.mask, grid)
    _write_slices(run, sim.slices, grid, "slices.nii", "slices.csv")
    write_motion_csv(run.output("trajectory.csv"), sim.slices)
    run.write_manifest({"result.n_slices": len(sim.slices), "result.pose_center": grid.center})
    return {"slices": len(sim.slices)}


def cmd_register(args, settings: Settings) -> dict[str, object]:
    run = Run("register", args, settings)
    stack = run.add_input("slices", _require(_input(args, "slices", "slices.nii"), "slice stack"))
    sidecar = run.add_input("sidecar", _require(_input(args, "sidecar", "slices.csv"), "slice sidecar CSV"))
    mask_path = _input(args, "mask", "mask.nii")
    slices, grid = _load_slices(stack, sidecar)
    mask = None
    if args.mask or mask_path.is_file():
        mask = _load_mask(run.add_input("mask", _require(mask_path, "mask")), grid.shape3)
    config = settings.registration()
    psf = settings.psf(grid)
    run.config.update(psf.as_config())
    window = min(config.quiescence_window, grid.nt)
    corrected, result, target, start = register_pipeline(slices, grid, config, mask, psf)
    run.out.mkdir(parents=True, exist_ok=True)
    write_nifti(target.as_4d(grid.tr), run.output("target.nii"))
    write_motion_csv(run.output("motion.csv"), corrected)
    _write_slices(run, corrected, grid, None, "slices_registered.csv")
    run.write_manifest({
        "result.target_start": start,
        "result.target_window": window,
        "result.flagged_slices": int(result.flagged.sum()),
        "result.mean_score": float(np.mean(result.scores)) if len(result.scores) else 0.0,
        "result.pose_center": grid.center,
    })
    return {"flagged": int(result.flagged.sum())}


def cmd_reconstruct(args, settings: Settings) -> dict[str, object]:
    run = Run("reconstruct", args, settings)
    stack = run.add_input("slices", _require(_input(args, "slices", "slices.nii"), "slice stack"))
    sidecar = run.add_input("sidecar", _require(_input(args, "sidecar", "slices.csv"), "slice sidecar CSV"))
    poses = None
    if args.poses:
        poses = run.add_input("poses", _require(Path(args.poses), "pose CSV"))
    slices, grid = _load_slices(stack, sidecar)
    if poses is not None:
        slices = apply_motion(slices, read_motion_csv(poses, grid.center))
    psf = settings.psf(grid)
    config = settings.solver()
    run.config.update(psf.as_config())
    x, report = reconstruct(slices, grid, psf, config)
    baseline = interpolate_3d_baseline(slices, grid)
    raw = raw_series(slices, grid)
    run.out.mkdir(parents=True, exist_ok=True)
    write_nifti(x, run.output("recon.nii"))
    write_nifti(baseline.volume, run.output("linear.nii"))
    write_nifti(raw, run.output("raw.nii"))
    write_nifti_array(run.output("coverage.nii"), baseline.coverage.astype(np.int16), grid.spacing, grid.tr,
                      grid.origin, dtype="int16")
    write_report_csv(run.output("report.csv"), report.rows())
    run.write_manifest({
        "result.iterations": report.iterations,
        "result.converged": report.converged,
        "result.diverged": report.diverged,
        "result.final_objective": report.final_objective,
        "result.message": report.message or "none",
        "result.missing_timepoints": len(baseline.missing_timepoints),
        "result.pose_center": grid.center,
    })
    return {"iterations": report.iterations}


def cmd_evaluate(args, settings: Settings) -> dict[str, object]:
    run = Run("evaluate", args, settings)
    paths = {
        "raw": _require(_input(args, "raw", "raw.nii"), "raw series"),
        "linear": _require(_input(args, "linear", "linear.nii"), "linear reconstruction"),
        "recon": _require(_input(args, "recon", "recon.nii"), "4D reconstruction"),
        "mask": _require(_input(args, "mask", "mask.nii"), "mask"),
    }
    truth_path = _input(args, "truth", "truth.nii")
    if args.truth or truth_path.is_file():
        paths["truth"] = _require(truth_path, "ground truth")
    for name, path in paths.items():
        run.add_input(name, path)
    raw, linear, recon = (read_nifti(paths[k]) for k in ("raw", "linear", "recon"))
    mask = _load_mask(paths["mask"], raw.grid.shape3)
    truth = read_nifti(paths["truth"]) if "truth" in paths else None
    report = evaluate(raw, linear, recon, mask, truth, subject=args.subject)
    run.out.mkdir(parents=True, exist_ok=True)
    row = report.row()
    write_table_csv(run.output("table.csv"), TABLE_COLUMNS, [row])
    write_key_values(run.output("report.txt"), {k: v for k, v in row.items() if k != "subject"} | {"subject": args.subject or "none"})
    run.write_manifest()
    return row


# ------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for the numeric kernels (default 1)")
    common.add_argument("--output-dir", default=".", help="directory for outputs (default: current directory)")
    common.add_argument("--input-dir", help="directory holding default-named inputs (default: output dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="recon4d", description="Motion-compensated 4D reconstruction from scattered slices.")
    parser.add_argument("--version", action="version", version=f"recon4d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("simulate", parents=[common], help="synthesise a phantom series and its slices")

    p = sub.add_parser("register", parents=[common], help="estimate per-slice motion")
    p.add_argument("--slices", help="slice stack NIfTI (default slices.nii)")
    p.add_argument("--sidecar", help="slice sidecar CSV (default slices.csv)")
    p.add_argument("--mask", help="region mask NIfTI (default mask.nii if present)")

    p = sub.add_parser("reconstruct", parents=[common], help="4D reconstruction plus 3D baselines")
    p.add_argument("--slices", help="slice stack NIfTI (default slices.nii)")
    p.add_argument("--sidecar", help="slice sidecar CSV (default slices.csv)")
    p.add_argument("--poses", help="motion CSV overriding the sidecar poses")

    p = sub.add_parser("evaluate", parents=[common], help="sharpness / temporal std comparison table")
    for name, what in (("raw", "raw.nii"), ("linear", "linear.nii"), ("recon", "recon.nii"),
                       ("mask", "mask.nii"), ("truth", "truth.nii, optional")):
        p.add_argument(f"--{name}", help=f"default {what}")
    p.add_argument("--subject", default="", help="subject label for the table")
    return parser


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "register": cmd_register,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1 or args.threads > numba.config.NUMBA_NUM_THREADS:
            raise UsageError(f"--threads must be in [1, {numba.config.NUMBA_NUM_THREADS}], got {args.threads}")
        overrides: dict[str, object] = {}
        if args.config:
            overrides.update(read_key_values(_require(Path(args.config), "config file")))
        if args.seed is not None:
            overrides["seed"] = args.seed
        settings = Settings(overrides)
        numba.set_num_threads(args.threads)
        COMMANDS[args.command](args, settings)
    except (UsageError, InvalidParameterError, UndefinedMetricError) as exc:
        print(f"recon4d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NiftiError, OSError) as exc:
        print(f"recon4d {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
