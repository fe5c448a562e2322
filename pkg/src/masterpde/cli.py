"""Command-line interface: steady-state solves, training, simulation
experiments, borrowing-limit calibration, and a self-check suite.

Every run writes a ``manifest.json`` (config hash, seed, versions) next to
its outputs so results are traceable to exact inputs. Exit codes: 0 ok,
1 user error (flags, config, missing files), 2 internal failure.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

log = logging.getLogger("masterpde")


class CliError(Exception):
    """User-facing error: bad flags, unreadable config, missing files."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "economy": {},                  # EconomyKS field overrides
    "train": {},                    # TrainConfig field overrides
    "method": {
        "n_agents": 41, "include_z": False, "calibrated": False,
        "width": 64, "hidden": 5,
        "m": 51, "emb_hidden": 32, "emb_out": 10, "layers": 3,
        "dgm_width": 100, "d_g": 0.2,
        "pretrain_steps": 0, "pretrain_lr": 1e-3, "pretrain_points": 2048,
    },
    "spatial": {"param_seed": 0, "use_reference": False,
                "width": 64, "hidden": 5},
    "simulate": {"dt": 0.1, "n_sim": 100, "n_agents": 40, "m": 51,
                 "horizon": 10.0, "n_paths": 1000, "z0": -0.10},
    "calibrate": {"range": [0.0, 1.5], "tol": 5e-3, "max_iter": 20,
                  "ss_dt": 0.5, "ss_horizon": 200.0},
}


def load_config(path):
    """Merge a JSON config over the defaults, rejecting unknown keys."""
    cfg = {k: dict(v) for k, v in DEFAULT_CONFIG.items()}
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise CliError("config root must be a JSON object")

    from .economy import EconomyKS
    from .trainer import TrainConfig
    allowed = {
        "economy": {f.name for f in dataclasses.fields(EconomyKS)},
        "train": {f.name for f in dataclasses.fields(TrainConfig)},
        "method": set(DEFAULT_CONFIG["method"]),
        "spatial": set(DEFAULT_CONFIG["spatial"]),
        "simulate": set(DEFAULT_CONFIG["simulate"]),
        "calibrate": set(DEFAULT_CONFIG["calibrate"]),
    }
    for section, values in user.items():
        if section not in allowed:
            raise CliError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise CliError(f"config section {section!r} must be an object")
        for key in values:
            if key not in allowed[section]:
                raise CliError(f"unknown key {key!r} in section {section!r}")
        cfg[section].update(values)
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command, cfg, seed):
    from . import __version__
    manifest = {"command": command, "seed": seed,
                "config_sha256": config_hash(cfg),
                "versions": {"masterpde": __version__,
                             "python": platform.python_version(),
                             "numpy": np.__version__}}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def build_ks_economy(cfg):
    from .economy import EconomyKS
    try:
        return EconomyKS(**cfg["economy"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad economy config: {exc}") from exc


def build_spatial_economy(cfg):
    from . import spatial as sp
    s = cfg["spatial"]
    if s["use_reference"]:
        return sp.reference_spatial_economy(s["param_seed"])
    return sp.generate_spatial_params(seed=s["param_seed"])


def build_method_and_model(method_name, cfg, rng):
    """Returns (method, model, sampler, header_extra)."""
    from . import fd, spatial as sp
    from .networks import dgm_init, mlp_init
    from .trainer import (DiscreteStateMethod, FiniteAgentMethod, Model,
                          ProjectionMethod, ds_sampler, fa_sampler,
                          pj_sampler)
    mc = cfg["method"]
    if method_name == "finite-agent":
        econ = build_ks_economy(cfg)
        meth = FiniteAgentMethod(econ, n_agents=mc["n_agents"],
                                 include_z=mc["include_z"],
                                 calibrated=mc["calibrated"])
        spec = meth.default_spec(width=mc["width"], hidden=mc["hidden"])
        model = Model(spec, mlp_init(spec, rng))
        return meth, model, fa_sampler(econ, mc["n_agents"]), {
            "n_agents": mc["n_agents"], "include_z": mc["include_z"],
            "calibrated": mc["calibrated"]}
    if method_name in ("discrete-state", "projection"):
        econ = build_ks_economy(cfg)
        ss = fd.solve_steady_state(econ, 0.0, mc["m"])
        if method_name == "discrete-state":
            meth = DiscreteStateMethod(econ, ss.grid)
            sampler = ds_sampler(econ, [ss.g], mc["d_g"])
        else:
            from .projection import build_basis
            basis = build_basis(econ, ss)
            meth = ProjectionMethod(econ, basis)
            sampler = pj_sampler(econ, basis, [ss.g], mc["d_g"])
        spec = meth.default_spec(emb_hidden=mc["emb_hidden"],
                                 emb_out=mc["emb_out"], layers=mc["layers"],
                                 width=mc["dgm_width"])
        model = Model(spec, dgm_init(spec, rng))
        return meth, model, sampler, {"m": mc["m"]}
    if method_name == "spatial":
        econ = build_spatial_economy(cfg)
        sc = cfg["spatial"]
        meth = sp.SpatialMethod(econ)
        spec = meth.default_spec(width=sc["width"], hidden=sc["hidden"])
        model = Model(spec, mlp_init(spec, rng))
        bases = [sp.spatial_steady_state(econ, z)[1]
                 for z in (0.0, 0.03, -0.03)]
        sampler = lambda r, n, epoch: sp.spatial_sample(econ, r, bases, n)
        return meth, model, sampler, {
            "economy_json": sp.economy_to_json(econ)}
    raise CliError(f"unknown method {method_name!r}")


def save_model_checkpoint(path, method_name, model, seed, extra):
    from .networks import pack, save_checkpoint, spec_to_dict
    header = {"method": method_name, "spec": spec_to_dict(model.spec),
              "seed": seed}
    header.update(extra)
    save_checkpoint(path, header, pack(model.params))


def load_model_checkpoint(path, rng=None):
    """Rebuild (header, Model) from a checkpoint file."""
    from .networks import (dgm_init, load_checkpoint, mlp_init,
                           spec_from_dict, unpack)
    from .trainer import Model
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    try:
        header, flat = load_checkpoint(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    spec = spec_from_dict(header["spec"])
    rng = rng or np.random.default_rng(0)
    init = dgm_init if header["spec"]["kind"] == "dgm" else mlp_init
    template = init(spec, rng)
    return header, Model(spec, unpack(flat, template))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fd_solve(args):
    from . import fd
    cfg = load_config(args.config)
    econ = build_ks_economy(cfg)
    out = _ensure_out(args.out)
    ss = fd.solve_steady_state(econ, args.z, args.m)
    csv_path = os.path.join(out, "steady_state.csv")
    fd.save_steady_state_csv(csv_path, ss)
    write_manifest(out, "fd-solve", cfg, 0)
    print(f"r={ss.r:.6f} w={ss.w:.6f} K={ss.capital:.6f} -> {csv_path}")
    return 0


def _train_once(args, cfg):
    from .trainer import TrainConfig, pretrain, train
    out = _ensure_out(args.out)
    rng = np.random.default_rng(args.seed)
    meth, model, sampler, extra = build_method_and_model(args.method, cfg,
                                                         rng)
    mc = cfg["method"]
    if args.method == "finite-agent" and mc["pretrain_steps"] > 0:
        from .trainer import aiyagari_value_table
        table = aiyagari_value_table(meth.econ)
        pretrain(meth, model, sampler, rng, table,
                 steps=mc["pretrain_steps"], lr=mc["pretrain_lr"],
                 n_points=mc["pretrain_points"])
    try:
        tcfg = TrainConfig(seed=args.seed,
                           trace_path=os.path.join(out, "trace.csv"),
                           **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad train config: {exc}") from exc
    params, trace = train(meth, model, tcfg, sampler)
    ckpt = os.path.join(out, "model.ckpt")
    save_model_checkpoint(ckpt, args.method, model, args.seed, extra)
    return trace, ckpt


def cmd_train(args):
    cfg = load_config(args.config)
    trace, ckpt = _train_once(args, cfg)
    out = args.out
    write_manifest(out, f"train --method {args.method}", cfg, args.seed)
    last = trace[-1] if trace else None
    if last is None:
        raise CliError("training produced no complete epoch")
    print(f"epochs={len(trace)} final_loss={last.total:.6e} "
          f"residual_mse={last.residual_mse:.6e} -> {ckpt}")
    return 0


def _fa_policy_from_checkpoint(header, model, grid, cfg):
    from .trainer import FiniteAgentMethod
    econ = build_ks_economy(cfg)
    meth = FiniteAgentMethod(econ, n_agents=header["n_agents"],
                             include_z=header.get("include_z", False),
                             calibrated=header.get("calibrated", False))
    return econ, meth.grid_policy_fn(model, model.params, grid)


def cmd_simulate(args):
    from . import fd, simulate
    cfg = load_config(args.config)
    out = _ensure_out(args.out)
    header, model = load_model_checkpoint(args.checkpoint)
    sc = cfg["simulate"]
    rng = np.random.default_rng(args.seed)

    if args.experiment == "mit":
        if header["method"] != "finite-agent":
            raise CliError("the mit experiment needs a finite-agent "
                           "checkpoint")
        ss0 = fd.solve_steady_state(build_ks_economy(cfg), sc["z0"], sc["m"])
        econ, policy = _fa_policy_from_checkpoint(header, model, ss0.grid,
                                                  cfg)
        steps = int(round(sc["horizon"] / sc["dt"]))
        tp = simulate.hybrid_transition(
            econ, policy, ss0.g, np.zeros(steps + 1), ss0.grid,
            dt=sc["dt"], n_sim=sc["n_sim"], n_agents=sc["n_agents"],
            rng=rng)
        path = os.path.join(out, "mit_transition.csv")
        simulate.save_transition_csv(path, tp)
    elif args.experiment == "fanchart":
        if header["method"] != "finite-agent":
            raise CliError("the fanchart experiment needs a finite-agent "
                           "checkpoint")
        ss0 = fd.solve_steady_state(build_ks_economy(cfg), 0.0, sc["m"])
        econ, policy = _fa_policy_from_checkpoint(header, model, ss0.grid,
                                                  cfg)
        times, bands = simulate.fan_chart(
            econ, policy, ss0.g, ss0.grid, horizon=sc["horizon"],
            dt=sc["dt"], n_paths=sc["n_paths"], n_sim=sc["n_sim"],
            n_agents=sc["n_agents"], z0=0.0, rng=rng)
        path = os.path.join(out, "fan_chart.csv")
        simulate.save_fan_chart_csv(path, times, bands)
    elif args.experiment == "recession":
        from . import spatial as sp
        if header["method"] != "spatial":
            raise CliError("the recession experiment needs a spatial "
                           "checkpoint")
        econ = sp.economy_from_json(header["economy_json"])
        meth = sp.SpatialMethod(econ)
        V_net = meth.v_eval(model, model.params)
        _, g0 = sp.spatial_steady_state(econ, 0.0)
        z_lo = econ.z_min
        V_lo = np.array([V_net(j, z_lo, g0).v for j in range(econ.J)])
        w0 = sp.wages(econ, 0.0, g0)
        w_lo = sp.wages(econ, z_lo, g0)
        drift = sp.spatial_kfe_drift(econ, V_lo, g0)
        path = os.path.join(out, "recession.csv")
        import csv as _csv
        with open(path, "w", newline="") as fh:
            wr = _csv.writer(fh)
            wr.writerow(["location", "wage_change", "net_migration"])
            for j in range(econ.J):
                wr.writerow([j, w_lo[j] / w0[j] - 1.0, drift[j] / g0[j]])
    else:
        raise CliError(f"unknown experiment {args.experiment!r}")
    write_manifest(out, f"simulate --experiment {args.experiment}", cfg,
                   args.seed)
    print(f"wrote {path}")
    return 0


def network_capital(econ, meth, model, g0, grid, a_lb, cc, rng):
    """Long-run aggregate capital implied by the trained policy at a_lb.

    Relaxes the density at z = zbar for a fixed horizon; a fixed-point
    stopping rule would chase the cloud-resampling noise floor instead."""
    from . import simulate
    policy = meth.grid_policy_fn(model, model.params, grid, a_lb=a_lb)
    steps = max(1, int(round(cc["ss_horizon"] / cc["ss_dt"])))
    z_path = np.full(steps + 1, econ.zbar)
    tp = simulate.hybrid_transition(econ, policy, g0, z_path, grid,
                                    dt=cc["ss_dt"], n_sim=1,
                                    n_agents=meth.n - 1, rng=rng)
    return float(tp.K[-1])


def calibrate_a_lb(econ, meth, model, grid, g0, target_k, cc, rng):
    """Bisect the borrowing limit so stationary capital hits the target.

    Capital rises with the wealth floor, so the map is increasing."""
    lo, hi = cc["range"]
    k_lo = network_capital(econ, meth, model, g0, grid, lo, cc, rng)
    k_hi = network_capital(econ, meth, model, g0, grid, hi, cc, rng)
    if not (min(k_lo, k_hi) <= target_k <= max(k_lo, k_hi)):
        raise CliError(f"target K={target_k} outside achievable range "
                       f"[{k_lo:.3f}, {k_hi:.3f}]")
    increasing = k_hi >= k_lo
    for _ in range(cc["max_iter"]):
        mid = 0.5 * (lo + hi)
        k_mid = network_capital(econ, meth, model, g0, grid, mid, cc, rng)
        if abs(k_mid - target_k) < cc["tol"] or hi - lo < 1e-4:
            return mid
        if (k_mid < target_k) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cmd_calibrate(args):
    from . import fd
    from .economy import labor_aggregate
    from .trainer import TrainConfig, train_calibrated
    cfg = load_config(args.config)
    cfg["method"]["calibrated"] = True
    out = _ensure_out(args.out)
    rng = np.random.default_rng(args.seed)

    if args.checkpoint:
        header, model = load_model_checkpoint(args.checkpoint)
        if not header.get("calibrated"):
            raise CliError("checkpoint was not trained with a variable "
                           "borrowing limit")
        from .trainer import FiniteAgentMethod
        econ = build_ks_economy(cfg)
        meth = FiniteAgentMethod(econ, n_agents=header["n_agents"],
                                 include_z=header.get("include_z", False),
                                 calibrated=True)
    else:
        meth, model, sampler, extra = build_method_and_model(
            "finite-agent", cfg, rng)
        econ = meth.econ
        try:
            tcfg = TrainConfig(seed=args.seed, **cfg["train"])
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad train config: {exc}") from exc
        cc = cfg["calibrate"]
        train_calibrated(meth, model, tcfg, sampler,
                         param_range=tuple(cc["range"]))
        save_model_checkpoint(os.path.join(out, "model.ckpt"),
                              "finite-agent", model, args.seed, extra)

    cc = cfg["calibrate"]
    L = labor_aggregate(econ)
    target_k = args.target_kl * L
    ss = fd.solve_steady_state(econ, 0.0, cfg["method"]["m"])
    a_lb = calibrate_a_lb(econ, meth, model, ss.grid, ss.g, target_k, cc,
                          rng)
    write_manifest(out, f"calibrate --target-kl {args.target_kl}", cfg,
                   args.seed)
    with open(os.path.join(out, "calibration.json"), "w") as fh:
        json.dump({"a_lb": a_lb, "target_kl": args.target_kl}, fh)
    print(f"a_lb={a_lb:.4f}")
    return 0


def _verify_checks():
    """Fast invariant suite over every module; yields (name, ok, detail)."""
    from . import autodiff as ad, fd, simulate, spatial as sp
    from .discrete_state import (GridDist, kfe_drift_upwind, kfe_matrix,
                                 uniform_grid)
    from .economy import EconomyKS

    rng = np.random.default_rng(0)

    # forward derivatives of a composite against central differences
    f = lambda x: ad.exp(0.3 * x) * ad.tanh(x) + ad.power(x + 2.0, 1.5)
    x0 = 0.7
    _, d1, d2 = ad.forward_eval(f, x0)
    h = 1e-5
    num1 = (f(x0 + h) - f(x0 - h)) / (2 * h)
    num2 = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h ** 2
    yield ("autodiff forward derivatives",
           abs(d1 - num1) < 1e-6 * max(1, abs(num1))
           and abs(d2 - num2) < 1e-4 * max(1, abs(num2)),
           f"d1 err {abs(d1 - num1):.2e}")

    econ = EconomyKS()
    ss = fd.solve_steady_state(econ, 0.0, 51)
    resid = np.abs(ss.A.T @ ss.g.ravel(order="F")).max()
    yield ("fd stationary density", resid < 1e-10 and
           abs(ss.g.sum() - 1.0) < 1e-12 and 0.0 < ss.r < econ.rho,
           f"|A^T g| {resid:.2e}, r {ss.r:.4f}")

    dist = GridDist(ss.grid, ss.g)
    ok = True
    worst = 0.0
    for _ in range(100):
        pol = rng.uniform(0.5, 3.0, size=ss.g.shape)
        mu = kfe_drift_upwind(econ, pol, rng.uniform(-0.04, 0.04), dist)
        worst = max(worst, abs(float(mu.sum())))
    yield ("upwind KFE mass conservation", worst < 1e-12, f"{worst:.2e}")

    L1 = simulate.kfe_generator(econ, ss.policy, 0.0, dist)
    L2 = kfe_matrix(econ, ss.policy, 0.0, dist)
    yield ("simulation generator", np.array_equal(L1, L2),
           "matches columnwise operator")

    sp_econ = sp.generate_spatial_params(seed=1)
    V = rng.normal(size=50)
    g = rng.uniform(0.01, 0.05, 50)
    drift = sp.spatial_kfe_drift(sp_econ, V, g)
    val, probs = sp.moving_value_and_probs(sp_econ, V, 3)
    yield ("spatial flows", abs(drift.sum()) < 1e-12
           and abs(probs.sum() - 1.0) < 1e-12
           and val >= (V - sp_econ.tau[3]).max(),
           f"drift sum {abs(drift.sum()):.2e}")


def cmd_verify(args):
    failures = 0
    for name, ok, detail in _verify_checks():
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        if not ok:
            failures += 1
    if failures:
        print(f"{failures} check(s) failed")
        return 2
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser():
    p = _Parser(prog="masterpde", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap numeric worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("fd-solve", help="finite-difference steady state")
    q.add_argument("--config")
    q.add_argument("--m", type=int, default=93)
    q.add_argument("--z", type=float, default=0.0)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_fd_solve)

    q = sub.add_parser("train", help="train a value network")
    q.add_argument("--method", required=True,
                   choices=["finite-agent", "discrete-state", "projection",
                            "spatial"])
    q.add_argument("--config")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("simulate", help="run a post-training experiment")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--experiment", required=True,
                   choices=["mit", "fanchart", "recession"])
    q.add_argument("--config")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("calibrate", help="solve for the borrowing limit")
    q.add_argument("--target-kl", type=float, required=True)
    q.add_argument("--config")
    q.add_argument("--checkpoint", help="reuse a trained calibrated model")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("verify", help="run the invariant self-checks")
    q.set_defaults(func=cmd_verify)
    return p


def _cap_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        _cap_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:                       # internal failure
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
