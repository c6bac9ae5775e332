"""Delimited text records for trajectories, campaigns, and manifold reports.

All writers are timestamp-free so identical inputs produce byte-identical
files. Floats are rendered with repr-level precision ('%.17g').
"""

from __future__ import annotations

import hashlib

import numpy as np

CHECKPOINT_MAGIC = "# dsgdlab-checkpoints v1"
CAMPAIGN_MAGIC = "# dsgdlab-campaign v1"
SUMMARY_MAGIC = "# dsgdlab-summary v1"
REPORT_MAGIC = "# dsgdlab-manifold-report v1"


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) or isinstance(x, np.floating):
        return "%.17g" % float(x)
    return str(x)


def write_trajectory(traj, path, include_state=False):
    """One checkpoint per line: step, zeta, consensus_error, grad_norm,
    state_norm, and optionally the full state."""
    cols = ["step", "zeta", "consensus_error", "grad_norm", "state_norm"]
    state = traj.states if include_state else None
    if include_state and state is None:
        raise ValueError("trajectory has no recorded states")
    if state is not None:
        cols += [f"x{i}" for i in range(state.shape[1])]
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write("# kind: discrete\n")
        fh.write("# columns: " + " ".join(cols) + "\n")
        for i in range(len(traj.steps)):
            row = [traj.steps[i], traj.zeta[i], traj.consensus_error[i],
                   traj.grad_norm[i], traj.state_norm[i]]
            if state is not None:
                row += list(state[i])
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def write_solution(solution, path, loss=None, rotation=None):
    """Serialize a continuous solution in the same checkpoint format,
    tagged continuous; metric columns are filled when the loss and rotation
    are supplied, otherwise nan."""
    states = solution.states
    cols = ["step", "zeta", "consensus_error", "grad_norm", "state_norm"]
    cols += [f"x{i}" for i in range(states.shape[1])]
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write("# kind: continuous\n")
        fh.write("# columns: " + " ".join(cols) + "\n")
        for i, t in enumerate(solution.times):
            x = states[i]
            if loss is not None and rotation is not None:
                cons = float(rotation.off_constraint_norm(x))
                proj = rotation.project_constraint(x)
                gn = float(np.linalg.norm(rotation.constraint_part(loss.subgradient(proj))))
            else:
                cons, gn = float("nan"), float("nan")
            row = [i, t, cons, gn, float(np.linalg.norm(x))] + list(x)
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def read_checkpoints(path):
    """Parse a checkpoint file into (kind, columns, array)."""
    kind, cols, rows = None, None, []
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint record file")
        for line in fh:
            line = line.strip()
            if line.startswith("# kind:"):
                kind = line.split(":", 1)[1].strip()
            elif line.startswith("# columns:"):
                cols = line.split(":", 1)[1].split()
            elif line and not line.startswith("#"):
                rows.append([float(v) for v in line.split("\t")])
    return kind, cols, np.array(rows)


def config_hash(sections):
    """Order-independent hash of the semantic config content.

    sections maps section name -> {key: value}; the output section is
    excluded so relocating results does not change identity.
    """
    digest = hashlib.sha256()
    for name in sorted(sections):
        if name == "output":
            continue
        for key in sorted(sections[name]):
            digest.update(f"[{name}] {key} = {sections[name][key]}\n".encode())
    return digest.hexdigest()[:16]


def write_campaign(result, path):
    """Per-seed records sorted by seed, preceded by provenance comments."""
    with open(path, "w") as fh:
        fh.write(CAMPAIGN_MAGIC + "\n")
        fh.write(f"# config-hash: {result.config_hash}\n")
        fh.write(f"# experiment: {result.kind}\n")
        fh.write(f"# library-version: {result.version}\n")
        fh.write("# columns: " + " ".join(result.fields) + "\n")
        for rec in sorted(result.records, key=lambda r: r["seed"]):
            fh.write("\t".join(_fmt(rec[f]) for f in result.fields) + "\n")


def read_campaign(path):
    meta, fields, rows = {}, None, []
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != CAMPAIGN_MAGIC:
            raise ValueError(f"{path} is not a campaign record file")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# columns:"):
                fields = line.split(":", 1)[1].split()
            elif line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            elif line:
                rows.append(line.split("\t"))
    records = []
    for row in rows:
        rec = {}
        for name, val in zip(fields, row):
            try:
                num = float(val)
                rec[name] = int(num) if name == "seed" and num == int(num) else num
            except ValueError:
                rec[name] = val
        records.append(rec)
    return meta, fields, records


def write_summary(result, path):
    with open(path, "w") as fh:
        fh.write(SUMMARY_MAGIC + "\n")
        fh.write(f"# config-hash: {result.config_hash}\n")
        fh.write(f"experiment = {result.kind}\n")
        fh.write(f"name = {result.name}\n")
        fh.write(f"rows = {len(result.records)}\n")
        for key in sorted(result.aggregates):
            fh.write(f"{key} = {_fmt(result.aggregates[key])}\n")


def write_manifold_report(report, path):
    """Structured text report: one [section] per check with key = value lines."""
    with open(path, "w") as fh:
        fh.write(REPORT_MAGIC + "\n")
        fh.write(f"# config-hash: {report.get('config_hash', 'n/a')}\n")
        for section in sorted(k for k in report if isinstance(report[k], dict)):
            fh.write(f"\n[{section}]\n")
            for key in sorted(report[section]):
                fh.write(f"{key} = {_fmt(report[section][key])}\n")
