"""End-to-end pipeline: named stages with content-hash caching and CSV exports."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .artifacts import ArtifactStore, StageArtifact, write_csv
from .dynamics import IntegratorConfig, drift_from_config

log = logging.getLogger(__name__)
TWO_PI = 2.0 * math.pi

# stage -> (upstream stages, config sections hashed into its key)
STAGES = {
    "orbit": ((), ("drift", "integrator")),
    "manifold": (("orbit",), ("manifold",)),
    "heteroclinics": (("manifold",), ("heteroclinics",)),
    "maslov": (("heteroclinics",), ("maslov",)),
    "river": (("maslov",), ("river",)),
    "pivot": (("river",), ("river",)),
    "action": (("pivot",), ("action",)),
    "montecarlo": (("orbit",), ("montecarlo", "seed")),
    "compare": (("action", "montecarlo"), ()),
}
ORDER = list(STAGES)

# column schemas of the CSV exports, stage -> {file: columns}
SCHEMAS = {
    "orbit": {"gamma": ["tau", "x", "y", "s"]},
    "manifold": {"curve_k": ["theta", "x", "y", "p", "q"]},
    "heteroclinics": {
        "heteroclinics": ["label", "theta", "exit_side", "d_origin", "d_gamma", "min_d_gamma",
                          "t_min_d_gamma", "angle", "angle_fd", "mirror_of"],
        "trajectories": ["label", "t", "x", "y", "p", "q"],
    },
    "maslov": {"maslov": ["theta", "label", "index", "index_half_tol", "conjugate_times"],
               "rho12": ["theta", "t", "rho12"]},
    "river": {"river": ["theta", "exit_s", "exit_time", "winding", "maslov", "collar_time",
                        "conjugate_times"]},
    "pivot": {"mouth": ["theta", "exit_s", "exit_time", "winding", "x", "y"]},
    "action": {"profile": ["kind", "label", "theta", "S", "C", "I", "eps", "exited", "exit_s",
                           "winding"],
               "om_path": ["eps", "t", "x", "y", "p", "q"],
               "jump_scan": ["eps", "theta_min", "value", "winding"]},
    "montecarlo": {"exits": ["path_id", "tau", "x", "y", "s"],
                   "heatmap": ["ix", "iy", "x", "y", "count"],
                   "s_histogram": ["s_lo", "s_hi", "count"],
                   "kde_slices": ["t", "n", "mode_x", "mode_y", "mass"]},
    "compare": {"markers": ["kind", "s", "x", "y", "theta"],
                "s_histogram": ["s_lo", "s_hi", "count"]},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


def _traj_rows(traj, label, n=400, key="label"):
    t = np.linspace(traj.t0, traj.t1, n)
    z = traj(t)[:, :4]
    return [{key: label, "t": float(a), "x": b[0], "y": b[1], "p": b[2], "q": b[3]}
            for a, b in zip(t, z.tolist())]


def calibrate(theta: float) -> float:
    """Calibrated angle; the identity for the orientation used here."""
    return float(theta)


class Pipeline:
    def __init__(self, cfg: dict, out=None, jobs: int | None = None, force: bool = False):
        self.cfg = cfg
        self.root = Path(out or cfg["output"])
        self.store = ArtifactStore(self.root)
        self.jobs = int(jobs or cfg.get("jobs", 1))
        self.force = force
        self.cache: dict[str, StageArtifact] = {}
        self.ran: list[str] = []
        self.hits: list[str] = []
        self.config_hash = cfgmod.config_hash(cfg)

    # -- bookkeeping ------------------------------------------------------
    def stage_hash(self, stage: str) -> str:
        deps, sections = STAGES[stage]
        parts = {s: self.cfg.get(s) for s in sections}
        return cfgmod.digest(stage, __version__, parts, [self.stage_hash(d) for d in deps])

    def active(self, stage: str) -> bool:
        if self.cfg.get("montecarlo") is None and stage in ("montecarlo", "compare"):
            return False
        return True

    def get(self, stage: str) -> StageArtifact:
        if stage in self.cache:
            return self.cache[stage]
        if not self.active(stage):
            raise StageError(stage, RuntimeError("stage disabled by configuration"))
        for d in STAGES[stage][0]:
            self.get(d)
        h = self.stage_hash(stage)
        if not self.force and self.store.is_fresh(stage, h):
            art = self.store.load(stage)
            self.hits.append(stage)
            log.info("stage %s: cache hit (%s)", stage, h)
        else:
            log.info("stage %s: running", stage)
            t0 = time.perf_counter()
            try:
                art = getattr(self, "_" + stage)()
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - tag and re-raise
                raise StageError(stage, exc) from exc
            art.input_hash = h
            art.config_hash = self.config_hash
            art.payload["elapsed"] = time.perf_counter() - t0
            self.store.save(art)
            self.ran.append(stage)
        self.cache[stage] = art
        return art

    def run(self, upto: str | None = None) -> dict:
        stages = ORDER if upto is None else self._closure(upto)
        for s in stages:
            if self.active(s):
                self.get(s)
        rep = self.report()
        (self.root / "summary.json").write_text(json.dumps(rep, indent=1))
        return rep

    def _closure(self, stage):
        need = []

        def visit(s):
            for d in STAGES[s][0]:
                visit(d)
            if s not in need:
                need.append(s)
        visit(stage)
        return need

    # -- shared objects ---------------------------------------------------
    def field(self):
        d = self.cfg["drift"]
        return drift_from_config(d["name"], d.get("params"), d.get("f"), d.get("g"))

    def integrators(self):
        c = self.cfg["integrator"]
        return (IntegratorConfig(rtol=c["rtol"], atol=c["atol"]),
                IntegratorConfig(rtol=c["sweep_rtol"], atol=c["sweep_rtol"] * 1e-2))

    def problem(self):
        return self.get("manifold").objects["problem"]

    # -- stages -----------------------------------------------------------
    def _orbit(self):
        from .manifolds import find_periodic_orbit, monodromy_and_stable_direction

        orbit = find_periodic_orbit(self.field())
        monodromy_and_stable_direction(orbit)
        tau = orbit.taus
        s = orbit.arc_length(tau)
        rows = [{"tau": a, "x": b[0], "y": b[1], "s": c}
                for a, b, c in zip(tau.tolist(), orbit.samples.tolist(), s.tolist())]
        payload = {"period": orbit.period, "min_radius": orbit.min_radius,
                   "max_radius": orbit.max_radius, "circumference": orbit.circumference,
                   "orientation": orbit.orientation, "star_shaped": orbit.star_shaped,
                   "multipliers2": [[m.real, m.imag] for m in orbit.multipliers2],
                   "multipliers4": [[m.real, m.imag] for m in orbit.multipliers4]}
        return StageArtifact("orbit", "", payload, {"samples": orbit.samples,
                                                    "polar_table": orbit.polar_table},
                             {"gamma": rows}, {"orbit": orbit})

    def _manifold(self):
        from .heteroclinics import inner_stable_mesh
        from .manifolds import compute_local_unstable
        from .problem import EscapeProblem

        m = self.cfg["manifold"]
        orbit = self.get("orbit").objects["orbit"]
        precise, sweep = self.integrators()
        man = compute_local_unstable(orbit.field, m["order"])
        problem = EscapeProblem(orbit.field, orbit, man, sweep=sweep, precise=precise)
        mesh = inner_stable_mesh(orbit, nu=m["nu"], t_f=m["tf"])
        th = np.linspace(0.0, TWO_PI, m["theta_samples"], endpoint=False)
        K = man.point(th)
        rows = [{"theta": a, "x": b[0], "y": b[1], "p": b[2], "q": b[3]}
                for a, b in zip(th.tolist(), K.tolist())]
        payload = {"order": man.order, "scale": man.scale, "residual": man.residual,
                   "mu": [man.mu1.real, man.mu1.imag], "rotation": man.rotation,
                   "mesh": {"nu": mesh.nu, "t_f": mesh.t_f, "sign": mesh.sign,
                            "strips": int(mesh.points.shape[0])}}
        arrays = {"alpha_real": man.alpha.real, "alpha_imag": man.alpha.imag, "xi": man.xi,
                  "curve_k": K, "mesh": mesh.points}
        return StageArtifact("manifold", "", payload, arrays, {"curve_k": rows},
                             {"problem": problem, "mesh": mesh})

    def _heteroclinics(self):
        from .heteroclinics import find_heteroclinics, transversality_check

        h = self.cfg["heteroclinics"]
        problem = self.problem()
        mesh = self.get("manifold").objects["mesh"]
        hets, info = find_heteroclinics(problem, self.cfg["manifold"]["theta_samples"],
                                        h["threshold"], mesh=mesh, tol=h["tol"])
        rows, trows, summ = [], [], []
        for k, het in enumerate(hets):
            het.label = het.label or f"C{k}"
            tc = transversality_check(problem, het, mesh)
            het.meta["transversality"] = {a: tc[a] for a in ("angle", "angle_fd", "flow_angle",
                                                             "t_mid")}
            mir = [o.label or f"C{j}" for j, o in enumerate(hets)
                   if abs(np.mod(o.theta - het.theta - math.pi + math.pi, TWO_PI) - math.pi) < 1e-6]
            het.meta["mirror_of"] = mir[0] if mir else None
            rows.append({"label": het.label, "theta": het.theta, "exit_side": het.exit_side,
                         "d_origin": het.d_origin, "d_gamma": het.d_gamma,
                         "min_d_gamma": het.min_d_gamma, "t_min_d_gamma": het.t_min_d_gamma,
                         "angle": tc["angle"], "angle_fd": tc["angle_fd"],
                         "mirror_of": het.meta["mirror_of"]})
            trows += _traj_rows(het.trajectory, het.label)
            summ.append(het.summary())
        pairs = sum(1 for r in rows if r["mirror_of"]) // 2
        payload = {"count": len(hets), "mirror_pairs": pairs, "thetas": [x.theta for x in hets],
                   "n_candidates": info["n_candidates"], "n_clusters": info["n_clusters"],
                   "heteroclinics": summ}
        return StageArtifact("heteroclinics", "", payload, {},
                             {"heteroclinics": rows, "trajectories": trows}, {"hets": hets})

    def _maslov(self):
        from .maslov import conjugate_points, find_zeros

        problem = self.problem()
        hets = self.get("heteroclinics").objects["hets"]
        precise, _ = self.integrators()
        half = IntegratorConfig(rtol=precise.rtol / 2, atol=precise.atol / 2)
        rows, traces, idx = [], [], {}
        targets = [(h.theta, h.label) for h in hets] + \
            [(float(t), "") for t in self.cfg["maslov"]["thetas"]]
        for th, label in targets:
            rec = conjugate_points(problem, th, t_end=30.0, stop_at_exit=not label)
            rec2 = conjugate_points(problem, th, t_end=30.0, stop_at_exit=not label, config=half,
                                    keep_trajectory=False)
            if label:
                idx[th] = rec.index
            rows.append({"theta": th, "label": label, "index": rec.index,
                         "index_half_tol": rec2.index,
                         "conjugate_times": ";".join(f"{t:.10g}" for t in rec.times)})
            tr = rec.trajectory
            t = np.linspace(tr.t0, tr.t1, 400)
            r = tr(t)[:, 4:10]
            r12 = r[:, 0] / np.linalg.norm(r, axis=1)
            traces += [{"theta": th, "t": a, "rho12": b} for a, b in zip(t.tolist(), r12.tolist())]
        payload = {"indices": [[float(k), int(v)] for k, v in idx.items()], "rows": rows}
        return StageArtifact("maslov", "", payload, {}, {"maslov": rows, "rho12": traces},
                             {"indices": idx})

    def _river(self):
        from .maslov import conjugate_points
        from .river import (ExitPoint, collar_entry_time, river_from_heteroclinics,
                            transition_map_G)

        problem = self.problem()
        hets = self.get("heteroclinics").objects["hets"]
        idx = self.get("maslov").objects["indices"]
        r = self.cfg["river"]
        for h in hets:
            h.maslov = idx.get(h.theta, h.maslov)
        river = river_from_heteroclinics(problem, hets, idx)
        rows = []
        for th in river.grid(r["samples"]):
            ep = transition_map_G(problem, th, r["max_time"])
            rec = conjugate_points(problem, th, r["max_time"])
            row = {"theta": th, "exit_s": None, "exit_time": None, "winding": None,
                   "maslov": rec.index,
                   "collar_time": collar_entry_time(problem.orbit, rec.trajectory, r["collar"]),
                   "conjugate_times": ";".join(f"{t:.10g}" for t in rec.times)}
            if isinstance(ep, ExitPoint):
                row.update({"exit_s": ep.s, "exit_time": ep.time, "winding": ep.winding})
            rows.append(row)
        payload = {"theta1": river.theta1, "theta2": river.theta2, "lo": river.lo,
                   "hi": river.hi, "orientation": river.orientation, "collar": r["collar"],
                   "labels": {h.label: h.theta for h in river.heteroclinics}}
        return StageArtifact("river", "", payload, {}, {"river": rows}, {"river": river})

    def _pivot(self):
        from .river import mouth_of_river, mouth_properties, pivot_theta

        problem = self.problem()
        river = self.get("river").objects["river"]
        r = self.cfg["river"]
        pv = pivot_theta(problem, river, r["pivot_grid"])
        mouth = mouth_of_river(problem, river, pv.theta, ratio=r["refine_ratio"],
                               max_gap=r["mouth_gap"])
        rows = [{"theta": e.theta, "exit_s": e.s, "exit_time": e.time, "winding": e.winding,
                 "x": float(e.state[0]), "y": float(e.state[1])} for e in mouth]
        payload = {"theta": pv.theta, "gap": pv.gap, "conj_time": pv.conj_time,
                   "exit_time": pv.exit.time, "brackets": pv.brackets,
                   "point": {"x": float(pv.exit.state[0]), "y": float(pv.exit.state[1]),
                             "s": pv.exit.s},
                   "mouth": mouth_properties(problem, mouth)}
        return StageArtifact("pivot", "", payload, {}, {"mouth": rows}, {"pivot": pv})

    def _action(self):
        from .action import action_profile, om_jump_scan, om_minimizer, river_grid

        problem = self.problem()
        river = self.get("river").objects["river"]
        pv = self.get("pivot").objects["pivot"]
        a = self.cfg["action"]
        grid = river_grid(river, pv.theta, a["n_uniform"], a["n_geometric"],
                          self.cfg["river"]["refine_ratio"])
        scan = a.get("epsilon_scan")
        if scan:
            # the scan needs the profile deep into the winding region near theta1
            span = abs(river.theta1 - pv.theta)
            off = np.geomspace(1e-9, span, 300)[:-1]
            grid = np.unique(np.concatenate([grid, river.theta1 - river.orientation * off]))
        prof = action_profile(problem, grid, 0.0, a["r0"], a["border_distance"], river=river,
                              jobs=self.jobs)
        rows = [{"kind": "sample", "label": "", "eps": 0.0, **r} for r in prof.rows(0.0)]
        sels, paths = [], []
        for eps in a["epsilon"]:
            sel = om_minimizer(problem, prof, eps)
            sels.append(sel.summary())
            rows.append({"kind": "marker", "label": "theta_min", "theta": sel.theta_min,
                         "I": sel.value, "eps": eps})
            if sel.trajectory is not None:
                paths += [{"eps": eps, **r} for r in _traj_rows(sel.trajectory, eps, key="eps")]
        rows += [{"kind": "marker", "label": "theta1", "theta": river.theta1},
                 {"kind": "marker", "label": "theta2", "theta": river.theta2},
                 {"kind": "marker", "label": "pivot", "theta": pv.theta}]
        tables = {"profile": rows, "om_path": paths}
        payload = {"selections": sels, "n_samples": int(prof.thetas.size), "r0": a["r0"],
                   "border_distance": a["border_distance"]}
        if scan:
            eps_grid = np.geomspace(scan["lo"], scan["hi"], scan["n"])
            js = om_jump_scan(problem, prof, eps_grid)
            tables["jump_scan"] = js.rows()
            payload["jumps"] = js.jumps
        arrays = {"thetas": prof.thetas, "S": prof.S, "C": prof.C, "exited": prof.exited,
                  "exit_s": prof.exit_s, "winding": prof.winding}
        return StageArtifact("action", "", payload, arrays, tables, {"profile": prof})

    def _montecarlo(self):
        from . import montecarlo as mc

        m = self.cfg["montecarlo"]
        orbit = self.get("orbit").objects["orbit"]
        field = self.field()
        eta = float(self.cfg["drift"].get("params", {}).get("eta", 0.5))
        params = mc.SdeParams(eta=eta, eps=m["sqrt_eps"] ** 2, dt=m["dt"], t_max=m["tmax"],
                              seed=self.cfg["seed"])
        ens = mc.run_ensemble(params, m["n"], orbit=orbit, jobs=self.jobs, field=field)
        payload = {"ensemble": ens.summary()}
        if m["convergence"]:
            n = m["n"]
            b1, rep = ens, None
            for _ in range(m["max_doublings"] + 1):
                b2 = mc.run_ensemble(params, n, orbit=orbit, pid0=n, jobs=self.jobs, field=field)
                rep = mc.convergence_check(b1, b2)
                if rep.verdict == "converged":
                    break
                n *= 2
                b1 = mc.run_ensemble(params, n, orbit=orbit, jobs=self.jobs, field=field)
            ens = b1
            payload["ensemble"] = ens.summary()
            payload["convergence"] = rep.summary()
        dist = mc.exit_distribution(ens, orbit)
        payload["distribution"] = {
            "bin_width": dist.bin_width, "n_escaped": dist.n_escaped,
            "partner_offset": dist.partner_offset,
            "modes": [{"s": md.s, "x": float(md.xy[0]), "y": float(md.xy[1]),
                       "count": md.count, "region": list(md.region), "compass": md.compass}
                      for md in dist.modes]}
        hit = ens.escaped
        exits = [{"path_id": int(i), "tau": t, "x": p[0], "y": p[1], "s": s}
                 for i, t, p, s in zip(ens.path_id[hit], ens.tau[hit].tolist(),
                                       ens.exit_xy[hit].tolist(), ens.s[hit].tolist())]
        cx = 0.5 * (dist.heat_x[1:] + dist.heat_x[:-1])
        ii, jj = np.nonzero(dist.heat)
        heat = [{"ix": int(i), "iy": int(j), "x": float(cx[i]), "y": float(cx[j]),
                 "count": int(dist.heat[i, j])} for i, j in zip(ii, jj)]
        hist = [{"s_lo": a, "s_hi": b, "count": int(c)}
                for a, b, c in zip(dist.edges[:-1], dist.edges[1:], dist.counts)]
        tables = {"exits": exits, "heatmap": heat, "s_histogram": hist}
        if m["kde_paths"]:
            paths = mc.histories(ens, "escaped", orbit, limit=m["kde_paths"])
            sl = mc.time_slice_kde(paths, params.dt, m["kde_radius"])
            tables["kde_slices"] = [{"t": q.t, "n": q.n, "mode_x": q.mode[0],
                                     "mode_y": q.mode[1], "mass": q.mass} for q in sl]
        elif m["keep_paths"] != "none":
            paths = mc.histories(ens, m["keep_paths"], orbit)
        arrays = {"status": ens.status, "tau": ens.tau, "exit_xy": ens.exit_xy, "s": ens.s}
        if m["keep_paths"] != "none" and not m["kde_paths"]:
            arrays.update({f"path_{k}": v for k, v in paths.items()})
        return StageArtifact("montecarlo", "", payload, arrays, tables, {"distribution": dist})

    def _compare(self):
        act = self.get("action")
        mcart = self.get("montecarlo")
        pv = self.get("pivot").payload
        dist = mcart.objects["distribution"]
        sqe = self.cfg["montecarlo"]["sqrt_eps"]
        sels = act.payload["selections"]
        sel = min(sels, key=lambda s: abs(s["sqrt_eps"] - sqe))
        om = sel["om_point"]
        out = {"sqrt_eps": sqe, "om_eps": sel["eps"], "bin_width": dist.bin_width}
        markers = [{"kind": "pivot", "s": pv["point"]["s"], "x": pv["point"]["x"],
                    "y": pv["point"]["y"], "theta": pv["theta"]}]
        if om is not None:
            mode = dist.nearest_mode(om["s"])
            d = dist.arc_distance(om["s"])
            out.update({"om_s": om["s"], "mode_s": mode.s, "mode_compass": mode.compass,
                        "om_mode_distance": d, "om_within_bin": bool(d <= dist.bin_width)})
            markers.append({"kind": "om", "s": om["s"], "x": om["x"], "y": om["y"],
                            "theta": sel["theta_min"]})
        out["pivot_mode_distance"] = dist.arc_distance(pv["point"]["s"])
        markers += [{"kind": "mode", "s": md.s, "x": float(md.xy[0]), "y": float(md.xy[1])}
                    for md in dist.modes]
        hist = [{"s_lo": a, "s_hi": b, "count": int(c)}
                for a, b, c in zip(dist.edges[:-1], dist.edges[1:], dist.counts)]
        return StageArtifact("compare", "", out, {}, {"markers": markers, "s_histogram": hist})

    # -- outputs ----------------------------------------------------------
    def report(self) -> dict:
        def pay(stage):
            # only artifacts matching the current configuration
            if stage in self.cache:
                return self.cache[stage]
            if self.active(stage) and self.store.is_fresh(stage, self.stage_hash(stage)):
                return self.store.load(stage, objects=False)
            return None
        rep = {"config_hash": self.config_hash, "stages_run": self.ran,
               "cache_hits": self.hits, "calibration": {"shift": 0.0, "reflect": False}}
        h = pay("heteroclinics")
        if h:
            rep["heteroclinics"] = {"count": h.payload["count"], "thetas": h.payload["thetas"],
                                    "mirror_pairs": h.payload["mirror_pairs"]}
        rv = pay("river")
        if rv:
            rep["theta1"] = rv.payload["theta1"]
            rep["theta2"] = rv.payload["theta2"]
        pv = pay("pivot")
        if pv:
            rep["theta_hat"] = pv.payload["theta"]
            rep["pivot_point"] = pv.payload["point"]
        act = pay("action")
        if act:
            rep["om"] = [{"eps": s["eps"], "theta_min": s["theta_min"],
                          "theta_min_calibrated": calibrate(s["theta_min"]),
                          "boundary": s["boundary"], "om_point": s["om_point"]}
                         for s in act.payload["selections"]]
            if act.payload.get("jumps") is not None:
                rep["jumps"] = act.payload["jumps"]
        mcp = pay("montecarlo")
        if mcp and self.active("montecarlo"):
            rep["escape_fraction"] = mcp.payload["ensemble"]["escape_fraction"]
            conv = mcp.payload.get("convergence")
            rep["convergence"] = conv["verdict"] if conv else None
        cmp_ = pay("compare")
        if cmp_ and self.active("compare"):
            rep["compare"] = {k: v for k, v in cmp_.payload.items() if k != "elapsed"}
        return rep


def export_plot_data(root, stage: str, fmt: str = "csv", dest=None) -> list[Path]:
    """Write a stage's tables as CSV (or JSON) files with the documented columns."""
    if stage not in SCHEMAS:
        raise ValueError(f"unknown stage {stage!r}")
    store = ArtifactStore(root)
    art = store.load(stage, objects=False)
    dest = Path(dest or store.path(stage))
    out = []
    comment = [f"stage={stage} input_hash={art.input_hash} config_hash={art.config_hash}"]
    for name, cols in SCHEMAS[stage].items():
        if name not in art.tables:
            continue
        if fmt == "csv":
            out.append(write_csv(dest / f"{name}.csv", art.tables[name], cols, comment))
        elif fmt == "json":
            p = dest / f"{name}.json"
            p.write_text(json.dumps({"columns": cols, "provenance": comment[0],
                                     "rows": art.tables[name]}))
            out.append(p)
        else:
            raise ValueError(f"unknown format {fmt!r}")
    return out


def run_pipeline(cfg: dict, out=None, jobs=None, upto=None, force=False) -> dict:
    return Pipeline(cfg, out, jobs, force).run(upto)
