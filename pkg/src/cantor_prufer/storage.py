"""On-disk form of a stage run, and digests for the run manifest."""

import hashlib
import json
from dataclasses import asdict

import numpy as np

from . import _kernel as kern
from .engine import PAIR_FIELDS, AnchorTrajectory, IntegratorControls
from .errors import ConfigError, DigestMismatch
from .potentials import stage_from_config, stage_to_config
from .verification import conditional_integral_profile

TRAJ_SCHEMA = "cantor_prufer trajectory v1"
RUN_SCHEMA = "cantor_prufer run v1"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_digests(files: dict, root):
    """Raise :class:`DigestMismatch` unless every listed file hashes as recorded."""
    import os
    for name, meta in sorted(files.items()):
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise DigestMismatch(f"{name}: listed in manifest but missing")
        got = sha256_file(path)
        if got != meta["sha256"]:
            raise DigestMismatch(f"{name}: sha256 {got[:12]}... does not match manifest "
                                 f"{meta['sha256'][:12]}...")


class StoredTrajectory(AnchorTrajectory):
    """Trajectory rebuilt from its records; no accepted-step grid, so no replay."""

    @property
    def x_end(self):
        return self._x_end

    @property
    def n_steps(self):
        return self._n_steps


def trajectory_columns(npair):
    cols = ["step", "x"]
    for j in range(npair):
        cols += [f"p{j}.{name}" for name in PAIR_FIELDS] + [f"p{j}.winding", f"p{j}.phase"]
    return cols + ["int_v"]


def trajectory_csv(traj: AnchorTrajectory) -> str:
    """Decimated records (every ``decimation``-th step plus every event)."""
    npair = traj.npair
    lines = [f"# {TRAJ_SCHEMA}", ",".join(trajectory_columns(npair))]
    for r in range(traj.rec_x.size):
        step = int(traj.rec_step[r])
        ph = traj.phase_at_step(step)
        row = [str(step), repr(float(traj.rec_x[r]))]
        for j in range(npair):
            b = kern.PAIR_W * j
            row += [repr(float(v)) for v in traj.rec_y[r, b:b + len(PAIR_FIELDS)]]
            row += [str(int(traj.rec_w[r, j])), str(int(ph[j]))]
        row.append(repr(float(traj.rec_y[r, -1])))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def run_meta(traj: AnchorTrajectory) -> dict:
    """Everything besides the records needed to rebuild the report."""
    return {
        "schema": RUN_SCHEMA,
        "stage": stage_to_config(traj.stage),
        "controls": asdict(traj.controls),
        "model": int(traj.model),
        "x0": traj.x0,
        "y0": [float(v) for v in traj.y0],
        "wind0": [int(v) for v in traj.wind0],
        "phase0": [int(v) for v in traj.phase0],
        "events": traj.events,
        "order_failures": traj.order_failures,
        "n_rejected": traj.n_rejected,
        "n_rhs": traj.n_rhs,
        "n_steps": traj.n_steps,
        "x_end": traj.x_end,
        "stopped_by_truncation": bool(traj.stopped_by_truncation),
        "final_y": [float(v) for v in traj.final_y],
        "final_wind": [int(v) for v in traj.final_wind],
        "final_phase": [int(v) for v in traj.final_phase],
        "cond_int_sup": conditional_integral_profile(traj),
    }


def run_meta_json(traj) -> str:
    return json.dumps(run_meta(traj), indent=1, sort_keys=True)


def _read_rows(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != f"# {TRAJ_SCHEMA}":
        raise ConfigError("trajectory file lacks the schema header")
    header = lines[1].split(",")
    rows = [ln.split(",") for ln in lines[2:]]
    return header, rows


def load_trajectory(meta_text: str, csv_text: str) -> StoredTrajectory:
    meta = json.loads(meta_text)
    if meta.get("schema") != RUN_SCHEMA:
        raise ConfigError("run file lacks the schema tag")
    stage = stage_from_config(meta["stage"])
    npair = len(stage.pairs)
    header, rows = _read_rows(csv_text)
    if header != trajectory_columns(npair):
        raise ConfigError("trajectory columns do not match the stage")
    nrec = len(rows)
    width = kern.PAIR_W * npair + 1
    rec_x = np.empty(nrec)
    rec_y = np.zeros((nrec, width))
    rec_w = np.empty((nrec, npair), dtype=np.int64)
    rec_step = np.empty(nrec, dtype=np.int64)
    nf = len(PAIR_FIELDS)
    for r, row in enumerate(rows):
        rec_step[r] = int(row[0])
        rec_x[r] = float(row[1])
        c = 2
        for j in range(npair):
            b = kern.PAIR_W * j
            rec_y[r, b:b + nf] = [float(v) for v in row[c:c + nf]]
            rec_w[r, j] = int(row[c + nf])
            c += nf + 2
        rec_y[r, -1] = float(row[c])
    ctl = IntegratorControls(**meta["controls"])
    tr = StoredTrajectory(
        stage=stage, controls=ctl, model=meta["model"], x0=meta["x0"],
        y0=np.array(meta["y0"]), wind0=np.array(meta["wind0"], dtype=np.int64),
        phase0=np.array(meta["phase0"], dtype=np.int64),
        xs=np.empty(0), hs=np.empty(0), v=np.empty(0), int_v=np.empty(0),
        rec_x=rec_x, rec_y=rec_y, rec_w=rec_w, rec_step=rec_step, events=meta["events"],
        order_failures=meta["order_failures"], n_rejected=meta["n_rejected"],
        n_rhs=meta["n_rhs"], final_phase=np.array(meta["final_phase"], dtype=np.int64),
        final_y=np.array(meta["final_y"]), final_wind=np.array(meta["final_wind"], dtype=np.int64),
        stopped_by_truncation=meta["stopped_by_truncation"])
    tr._x_end = float(meta["x_end"])
    tr._n_steps = int(meta["n_steps"])
    tr.stored_cond_int_sup = float(meta["cond_int_sup"])
    return tr

