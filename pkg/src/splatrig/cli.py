"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 validation/data error,
3 numerical failure. Results go to stdout as ``key=value`` lines,
diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteLoss, SplatRigError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("splatrig")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ids(text: str) -> np.ndarray:
    """Comma-separated vertex ids, or ``@file`` holding a JSON list."""
    if text.startswith("@"):
        return np.asarray(json.loads(Path(text[1:]).read_text()), dtype=np.int64)
    try:
        return np.asarray([int(t) for t in text.split(",") if t.strip()], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"bad vertex id list {text!r}") from exc


def _out(line: str) -> None:
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


# --- commands -----------------------------------------------------------------


def cmd_augment_mesh(a) -> int:
    from .io import load_mesh, write_obj, write_parts
    from .mouth import build_mouth_structure, splice

    if not (a.rings or (a.upper_ring and a.lower_ring)):
        raise UsageError("give --rings or both --upper-ring and --lower-ring")
    mesh = load_mesh(a.mesh, a.parts)
    if a.rings:
        rings = json.loads(Path(a.rings).read_text())
        upper, lower = np.asarray(rings["upper"], dtype=np.int64), np.asarray(rings["lower"], dtype=np.int64)
    else:
        upper, lower = _ids(a.upper_ring), _ids(a.lower_ring)
    aug = build_mouth_structure(mesh, upper, lower, depth=a.depth)
    out = splice(mesh, aug, a.part_name)
    write_obj(a.out_mesh, out)
    write_parts(a.out_parts, out)
    _out(f"vertices_added={len(aug.new_vertices)} faces_added={len(aug.new_faces)} parts={out.n_parts}")
    for name, c in zip(("upper", "lower"), aug.centers):
        _out(f"pseudo_center_{name}={c[0]:.10g},{c[1]:.10g}")
    return EXIT_OK


def cmd_gen_scene(a) -> int:
    from .io import save_scene
    from .rig import SceneSpec, generate_scene, preset_spec

    if a.config:
        spec = SceneSpec.from_dict(json.loads(Path(a.config).read_text()))
    else:
        spec = preset_spec(a.preset)
    overrides = {k: v for k, v in (("n_frames", a.frames), ("width", a.size), ("height", a.size)) if v is not None}
    for k, v in overrides.items():
        setattr(spec, k, v)
    scene = generate_scene(spec, a.seed, a.threads)
    save_scene(a.out, scene)
    mesh = scene.rig.base
    _out(f"scene={a.out} frames={len(scene.images)} train={len(scene.train_ids)} test={len(scene.test_ids)}")
    _out(f"faces={mesh.n_faces} vertices={mesh.n_vertices} parts={mesh.n_parts} splats={len(scene.reference)}")
    return EXIT_OK


def _train_config(a):
    from .trainer import TrainConfig

    cfg = TrainConfig.load(a.config) if a.config else TrainConfig(total_steps=2000, aps_step=1000)
    for flag, key in (("steps", "total_steps"), ("aps_step", "aps_step"), ("seed", "seed"), ("threads", "threads"),
                      ("log_interval", "log_interval"), ("eval_interval", "eval_interval"),
                      ("checkpoint_interval", "checkpoint_interval")):
        v = getattr(a, flag)
        if v is not None:
            setattr(cfg, key, v)
    if a.no_deform:
        cfg.deform = False
    cfg.validate()
    return cfg


def cmd_train(a) -> int:
    from .io import load_scene
    from .trainer import checkpoint_bytes, fit, state_from_checkpoint

    cfg = _train_config(a)
    scene = load_scene(a.scene, cfg.threads)
    state = None
    if a.resume:
        state = state_from_checkpoint(Path(a.resume).read_bytes())
        state.config.total_steps = cfg.total_steps
        state.config.threads = cfg.threads
        state.config.validate()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []

    def emit(line):
        records.append(line)
        _out(line)

    res = fit(cfg, scene, state=state, out_dir=out, on_log=emit)
    if res.aps is not None:
        for line in res.aps.lines:
            emit(line)
    for rec in res.eval_history:
        for split in ("train", "test"):
            if split in rec:
                emit(f"eval step={rec['step']} split={split} {rec[split].line()}")
    (out / "metrics.txt").write_text("".join(r + "\n" for r in records))
    (out / "config.json").write_text(json.dumps(res.state.config.to_dict(), indent=1) + "\n")
    final = out / "final.gavt"
    final.write_bytes(checkpoint_bytes(res.state))
    _out(f"checkpoint={final} steps={res.state.step} splats={len(res.state.splats)}")
    return EXIT_OK


def _orbit_camera(cam, deg: float):
    from .geometry import axis_angle_to_matrix

    R = axis_angle_to_matrix(np.array([0.0, np.radians(deg), 0.0]))
    out = type(cam)(**{**cam.__dict__})
    out.R = cam.R @ R.T
    return out


def cmd_animate(a) -> int:
    from .io import load_scene, write_png, write_ppm
    from .rig import RigParams
    from .trainer import Model, animate, state_from_checkpoint

    from .errors import BadCheckpoint

    scene = load_scene(a.scene, a.threads)
    try:
        data = Path(a.checkpoint).read_bytes()
    except OSError as exc:
        raise BadCheckpoint(str(exc)) from exc
    state = state_from_checkpoint(data)
    state.config.threads = a.threads
    if a.params:
        seq = [RigParams.from_dict(p) for p in json.loads(Path(a.params).read_text())["frames"]]
    else:
        seq = list(scene.params)
    model = Model.from_scene(scene)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = [None] * len(seq)
    if a.orbit:
        n = len(seq)
        cams = [_orbit_camera(model.camera, a.orbit * np.sin(2 * np.pi * i / max(n, 1))) for i in range(n)]
    n_out = 0
    for i, (p, cam) in enumerate(zip(seq, cams)):
        img = animate(state, model, [p], cam)[0]
        write_ppm(out / f"{i:05d}.ppm", img)
        if a.png:
            write_png(out / f"{i:05d}.png", img)
        n_out += 1
    _out(f"frames={n_out} out={out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .io import read_ppm
    from .losses import metrics

    m = metrics(read_ppm(a.pred), read_ppm(a.ref))
    _out(f"mse={m.mse:.10g} psnr={m.psnr:.6f} ssim={m.ssim:.10g}")
    return EXIT_OK


def cmd_aps_report(a) -> int:
    from .aps import _all_part_distances, gaussian_count_report
    from .io import load_scene
    from .trainer import state_from_checkpoint

    scene = load_scene(a.scene)
    state = state_from_checkpoint(Path(a.checkpoint).read_bytes())
    mesh = scene.rig.base
    asg = state.assignment
    _out(f"aps_done={str(state.aps_done).lower()} step={state.step} aps_step={state.config.aps_step}")
    if asg.distances is None:
        d = _all_part_distances(state.splats, mesh.part_of_face, mesh.n_faces, range(mesh.n_parts))
        asg.distances = np.array([d[k] for k in range(mesh.n_parts)])
    for line in asg.lines(mesh.part_names):
        _out(line)
    counts = gaussian_count_report(state.splats, asg)
    _out("gaussians_k " + " ".join(f"{k}={v / 1000:.3f}" for k, v in counts.items()))
    return EXIT_OK


MODULE_ALIASES = {"deform_net": "deform", "grad": "all", "splat": "splats"}


def cmd_grad_check(a) -> int:
    from .gradcheck import check_gradients, ops_for_module, registry

    module = MODULE_ALIASES.get(a.module, a.module)
    try:
        names = ops_for_module(module)
    except KeyError:
        raise UsageError(f"unknown module {a.module!r}")
    reg = registry()
    worst = 0.0
    for name in names:
        op, sampler = reg[name]
        rep = check_gradients(op, sampler, trials=a.trials, seed=a.seed)
        _out(rep.line())
        worst = max(worst, rep.max_rel_error)
    ok = worst <= a.tol
    _out(f"module={a.module} ops={len(names)} max_rel_error={worst:.3e} tol={a.tol:g} pass={str(ok).lower()}")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatrig", description="Mesh-rigged gaussian splat avatars at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=None if sp.prog.endswith("train") else 0)
        sp.add_argument("--threads", type=int, default=None if sp.prog.endswith("train") else 1)

    s = sub.add_parser("augment-mesh", help="add the mouth-interior structure to a mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--parts", required=True)
    s.add_argument("--rings", help='JSON sidecar {"upper": [vertex ids], "lower": [vertex ids]}')
    s.add_argument("--upper-ring", help="upper-lip vertex ids, comma-separated or @file.json")
    s.add_argument("--lower-ring")
    s.add_argument("--depth", type=float, default=0.02)
    s.add_argument("--part-name", default="mouth")
    s.add_argument("--out-mesh", required=True)
    s.add_argument("--out-parts", required=True)
    s.set_defaults(fn=cmd_augment_mesh)

    s = sub.add_parser("gen-scene", help="render a synthetic scene to a directory")
    s.add_argument("--preset", default="smoke", choices=["smoke", "aps", "mouth", "head"])
    s.add_argument("--config", help="SceneSpec JSON (overrides --preset)")
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(fn=cmd_gen_scene)

    s = sub.add_parser("train", help="fit splats to a scene directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", help="TrainConfig JSON; flags override it")
    s.add_argument("--steps", type=int)
    s.add_argument("--aps-step", type=int)
    s.add_argument("--log-interval", type=int)
    s.add_argument("--eval-interval", type=int)
    s.add_argument("--checkpoint-interval", type=int)
    s.add_argument("--no-deform", action="store_true")
    s.add_argument("--resume")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("animate", help="render a checkpoint under new parameters or views")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--params", help='JSON {"frames": [RigParams, ...]}; defaults to the scene frames')
    s.add_argument("--orbit", type=float, default=0.0, help="camera yaw amplitude in degrees")
    s.add_argument("--png", action="store_true")
    s.add_argument("--out", required=True)
    common(s, seed=False)
    s.set_defaults(fn=cmd_animate)

    s = sub.add_parser("eval", help="image metrics between two PPM files")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("aps-report", help="per-part distances and face-set assignment of a checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(fn=cmd_aps_report)

    s = sub.add_parser("grad-check", help="finite-difference gradient checks")
    s.add_argument("--module", default="all")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    common(s)
    s.set_defaults(fn=cmd_grad_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                         format="%(levelname)s %(name)s: %(message)s")
    if getattr(a, "threads", None) is not None and a.threads < 1:
        sys.stderr.write("error: --threads must be >= 1\n")
        return EXIT_USAGE
    try:
        return a.fn(a)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (SplatRigError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
