"""JSON run configuration: strict validation and object assembly.

The file is one JSON object with the sections below; unknown keys anywhere
are rejected with a dotted-path diagnostic.  ``docs/config-schema.json``
ships the authoritative field list with types and defaults.

All randomness in a run derives from one seed: SeedSequence(seed) generates
four stream seeds, in order: scenario synthesis, filter, map initialization,
reserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .filtering import FilterConfig
from .learning import LearnConfig
from .neuralmap import MapArchitecture
from .scenario import Scenario, TrajectorySpec, build_anchors
from .signal import ArrayGeometry, Calibration, SignalConfig, joint_response, los_geometry
from .states import LosTransitionParams, MotionParams, NoiseTransitionParams, Priors


class ConfigError(ValueError):
    "Schema violation; message carries the dotted field path."


_SCHEMA = {
    "seed": int,
    "signal": {
        "f_c": float, "bandwidth": float, "delta_f": float, "m_a": int,
        "array_spacing": float,
    },
    "scenario": {
        "bs_positions": list, "walls": list,
        "trajectory": {"waypoints": list, "speed": float, "dt": float, "steps": int},
        "blockage": list, "los_gamma": (float, list), "mpc_gamma_scale": float,
        "noise_eta": (float, list), "noise_snr_db": float, "imu_sigma": float,
    },
    "motion": {"sigma_acc": float, "sigma_o_walk": float, "sigma_o_meas": float},
    "los_model": {"p_appear": float, "p_visible": float, "c_gamma": float,
                  "appearance_mean": float, "appearance_shape": float},
    "noise_model": {"c_eta": float},
    "priors": {"position_mean": list, "position_std": float, "velocity_mean": list,
               "velocity_std": float, "orientation_mean": float,
               "orientation_std": float, "p_visible0": float, "gamma_mean": float,
               "gamma_shape": float, "eta_mean": float, "eta_shape": float},
    "filter": {"particles": int, "birth_particles": int, "subset": int,
               "threads": int},
    "map": {"features": int, "encoding_frequencies": int, "hidden1": int,
            "hidden2": int, "scene_extent": float, "pos_scale": float,
            "bias_scale": float, "gamma_scale": float, "gamma_hint": float},
    "learning": {"em_iters": int, "adam_steps": int, "adam_lr": float,
                 "chi_adam_lr": float, "segment_len": int,
                 "use_mmse_points": bool, "supervised": bool, "learn_chi": bool},
}


def _validate(node, schema, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"{path + key}: unknown key")
        spec = schema[key]
        if isinstance(spec, dict):
            _validate(value, spec, path + key + ".")
        else:
            types = spec if isinstance(spec, tuple) else (spec,)
            if float in types:
                types = types + (int,)
            if bool not in types and isinstance(value, bool):
                raise ConfigError(f"{path + key}: expected {spec}, got bool")
            if not isinstance(value, types):
                raise ConfigError(
                    f"{path + key}: expected {'/'.join(t.__name__ for t in types)}, "
                    f"got {type(value).__name__}")


@dataclass
class RunConfig:
    "Validated, fully assembled run configuration."

    seed: int
    cfg: SignalConfig
    geo: ArrayGeometry
    cal: Calibration
    scenario: Scenario
    motion: MotionParams
    los: LosTransitionParams
    noise: NoiseTransitionParams
    priors: Priors
    fcfg: FilterConfig
    arch: MapArchitecture
    learn: LearnConfig
    gamma_hint: float

    @property
    def stream_seeds(self):
        "Per-stream seeds: (scenario, filter, map-init, reserved)."
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(4)]


def _mean_snr_eta(cfg, geo, cal, scenario_raw, snr_db):
    "Noise floor hitting the requested direct-path SNR at the path midpoint."
    wp = np.asarray(scenario_raw["trajectory"]["waypoints"], dtype=float)
    center = wp.mean(axis=0)
    bs = np.asarray(scenario_raw["bs_positions"], dtype=float)
    gamma = np.mean(np.atleast_1d(np.asarray(scenario_raw.get("los_gamma", 1.0))))
    norms = []
    for j in range(len(bs)):
        g = los_geometry(center, 0.0, bs[j])
        h = joint_response(g.delay, g.direction, cfg, geo, cal)
        norms.append(np.linalg.norm(h) ** 2)
    return float(gamma * np.mean(norms) / 10 ** (snr_db / 10))


def load_config(path, seed_override: int | None = None) -> RunConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    return build_config(raw, seed_override)


def build_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    _validate(raw, _SCHEMA, "")
    for required in ("signal", "scenario"):
        if required not in raw:
            raise ConfigError(f"{required}: section is required")
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    streams = [int(s) for s in np.random.SeedSequence(seed).generate_state(4)]

    sig = raw["signal"]
    for key in ("f_c", "bandwidth", "delta_f", "m_a"):
        if key not in sig:
            raise ConfigError(f"signal.{key}: field is required")
    cfg = SignalConfig(f_c=float(sig["f_c"]), bandwidth=float(sig["bandwidth"]),
                       delta_f=float(sig["delta_f"]), m_a=int(sig["m_a"]))
    spacing = float(sig.get("array_spacing", cfg.wavelength / 2))
    geo = ArrayGeometry.ula(cfg.m_a, spacing)
    cal = Calibration.identity(cfg.m_f, cfg.m_a)

    scn = raw["scenario"]
    for key in ("bs_positions", "trajectory"):
        if key not in scn:
            raise ConfigError(f"scenario.{key}: field is required")
    traj_raw = scn["trajectory"]
    for key in ("waypoints", "speed", "dt", "steps"):
        if key not in traj_raw:
            raise ConfigError(f"scenario.trajectory.{key}: field is required")
    trajectory = TrajectorySpec(waypoints=np.asarray(traj_raw["waypoints"], float),
                                speed=float(traj_raw["speed"]),
                                dt=float(traj_raw["dt"]),
                                steps=int(traj_raw["steps"]))
    if "noise_eta" in scn and "noise_snr_db" in scn:
        raise ConfigError("scenario.noise_eta: give either noise_eta or noise_snr_db")
    if "noise_snr_db" in scn:
        noise_eta = _mean_snr_eta(cfg, geo, cal, scn, float(scn["noise_snr_db"]))
    else:
        noise_eta = scn.get("noise_eta", 1.0)
    try:
        scenario = Scenario(
            bs_positions=np.asarray(scn["bs_positions"], float),
            trajectory=trajectory,
            walls=[np.asarray(w, float) for w in scn.get("walls", [])],
            blockage=[[tuple(iv) for iv in station] for station in
                      scn.get("blockage", [])],
            los_gamma=scn.get("los_gamma", 1.0),
            mpc_gamma_scale=float(scn.get("mpc_gamma_scale", 0.25)),
            noise_eta=noise_eta,
            imu_sigma=float(scn.get("imu_sigma", 0.02)),
            seed=streams[0])
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc

    mot = raw.get("motion", {})
    motion = MotionParams(dt=trajectory.dt,
                          sigma_acc=float(mot.get("sigma_acc", 0.15)),
                          sigma_o_walk=float(mot.get("sigma_o_walk", 0.01)),
                          sigma_o_meas=float(mot.get("sigma_o_meas",
                                                     scenario.imu_sigma)))
    losm = raw.get("los_model", {})
    los = LosTransitionParams(
        p_appear=float(losm.get("p_appear", 0.05)),
        p_visible=float(losm.get("p_visible", 0.999)),
        c_gamma=float(losm.get("c_gamma", 100.0)),
        appearance_mean=float(losm.get("appearance_mean",
                                       float(np.mean(scenario.los_gamma)))),
        appearance_shape=float(losm.get("appearance_shape", 2.0)))
    noi = raw.get("noise_model", {})
    noise = NoiseTransitionParams(c_eta=float(noi.get("c_eta", 1000.0)))

    wp = trajectory.waypoints
    heading0 = wp[1] - wp[0]
    heading0 = heading0 / np.linalg.norm(heading0)
    pri = raw.get("priors", {})
    priors = Priors(
        position_mean=np.asarray(pri.get("position_mean", wp[0]), float),
        position_std=float(pri.get("position_std", 1.0)),
        velocity_mean=np.asarray(pri.get("velocity_mean",
                                         trajectory.speed * heading0), float),
        velocity_std=float(pri.get("velocity_std", 0.2)),
        orientation_mean=float(pri.get("orientation_mean",
                                       np.arctan2(heading0[1], heading0[0]))),
        orientation_std=float(pri.get("orientation_std", 0.05)),
        p_visible0=float(pri.get("p_visible0", 0.9)),
        gamma_mean=float(pri.get("gamma_mean", float(np.mean(scenario.los_gamma)))),
        gamma_shape=float(pri.get("gamma_shape", 2.0)),
        eta_mean=float(pri.get("eta_mean", float(np.mean(scenario.noise_eta)))),
        eta_shape=float(pri.get("eta_shape", 2.0)))

    fil = raw.get("filter", {})
    try:
        fcfg = FilterConfig(n_particles=int(fil.get("particles", 1000)),
                            n_birth=int(fil.get("birth_particles", 50)),
                            n_subset=int(fil.get("subset", 128)),
                            seed=streams[1],
                            threads=fil.get("threads"))
    except ValueError as exc:
        raise ConfigError(f"filter: {exc}") from exc

    scene_pts = np.vstack([scenario.bs_positions, wp] +
                          [a[0] for a in build_anchors(scenario) if len(a[0])])
    diag = float(np.linalg.norm(scene_pts.max(axis=0) - scene_pts.min(axis=0)))
    diag = max(diag, 1.0)
    mp = raw.get("map", {})
    arch = MapArchitecture(
        n_features=int(mp.get("features", 6)),
        n_enc=int(mp.get("encoding_frequencies", 4)),
        hidden1=int(mp.get("hidden1", 64)),
        hidden2=int(mp.get("hidden2", 64)),
        scene_extent=float(mp.get("scene_extent", diag)),
        pos_scale=float(mp.get("pos_scale", diag / 2)),
        bias_scale=float(mp.get("bias_scale", diag / 299_792_458.0)),
        gamma_scale=float(mp.get("gamma_scale", float(np.mean(scenario.los_gamma)))))
    gamma_hint = float(mp.get("gamma_hint", 0.1 * float(np.mean(scenario.los_gamma))))

    lr = raw.get("learning", {})
    learn = LearnConfig(
        em_iters=int(lr.get("em_iters", 20)),
        adam_steps=int(lr.get("adam_steps", 100)),
        adam_lr=float(lr.get("adam_lr", 1e-3)),
        chi_adam_lr=float(lr.get("chi_adam_lr", 1e-4)),
        segment_len=lr.get("segment_len"),
        use_mmse_points=bool(lr.get("use_mmse_points", False)),
        supervised=bool(lr.get("supervised", False)),
        learn_chi=bool(lr.get("learn_chi", False)))

    return RunConfig(seed=seed, cfg=cfg, geo=geo, cal=cal, scenario=scenario,
                     motion=motion, los=los, noise=noise, priors=priors, fcfg=fcfg,
                     arch=arch, learn=learn, gamma_hint=gamma_hint)
