"""Markdown summary of a run directory.

Each table cell cites the JSON file and pointer it was read from, so every
number can be traced back. Unreadable or malformed files are listed and
skipped; the rest of the summary is still produced.
"""

from __future__ import annotations

import json
from pathlib import Path

KNOWN_KINDS = ("matrix", "robustness", "ablation", "sweep_steps", "sweep_payload", "sweep_sampler", "verification")


def _fmt(x) -> str:
    if x is None:
        return "-"
    x = float(x)
    if x != x:
        return "nan"
    if x == 0.0 or 1e-3 <= abs(x) < 1e4:
        return f"{x:.4f}"
    return f"{x:.2e}"


def _exact(x) -> str:
    return repr(float(x))


def _table(header: list, rows: list) -> list:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def _matrix_section(name: str, doc: dict) -> list:
    cells = doc["matrix"]["cells"]
    names = doc.get("names") or doc["matrix"]["model_ids"]
    lines = [f"### Verification matrix ({doc.get('variant', '?')}): `{name}`", "",
             "Rows verify, columns are fingerprint sources. Cell: mean BA (p).", ""]
    rows = []
    for i, row in enumerate(cells):
        rows.append([names[i]] + [f"{_fmt(c['mean'])} ({_fmt(c['p'])})" for c in row]
                    + [f"`{name}#/matrix/cells/{i}/<col>/mean,p`"])
    lines += _table(["verifier \\ source"] + list(names) + ["ref"], rows)
    s = doc.get("summary", {})
    lines += ["", f"Diagonal mean BA {_fmt(s.get('diagonal_mean_ba'))}, off-diagonal mean BA "
              f"{_fmt(s.get('off_diagonal_mean_ba'))}, off-diagonal cells in [0.40, 0.65] with p > alpha: "
              f"{_fmt(s.get('off_diagonal_in_band_fraction'))} (`{name}#/summary`).", ""]
    return lines


def _robustness_section(name: str, doc: dict) -> list:
    rows = []
    for i, r in enumerate(doc["rows"]):
        if "skipped" in r:
            rows.append([r["attack"], r["model"], "skipped", "-", "-", f"`{name}#/rows/{i}/skipped`"])
        else:
            rep = r["report"]
            rows.append([r["attack"], r["model"], _fmt(rep["mean"]), _fmt(rep["p"]), rep["verdict"],
                         f"`{name}#/rows/{i}/report`"])
    return [f"### Robustness: `{name}`", "", "Target BA of each model's own fingerprints on the attacked copy.", ""] \
        + _table(["attack", "model", "mean BA", "p", "verdict", "ref"], rows) + [""]


def _ablation_section(name: str, doc: dict) -> list:
    rows = [[r["variant"], _fmt(r["lambda_rec"]), _fmt(r["lambda_reg"]), _fmt(r["diagonal_mean_ba"]),
             _fmt(r["off_diagonal_mean_ba"]), f"`{name}#/rows/{i}`"] for i, r in enumerate(doc["rows"])]
    return [f"### Ablation: `{name}`", ""] \
        + _table(["variant", "lambda_rec", "lambda_reg", "diagonal BA", "off-diagonal BA", "ref"], rows) \
        + ["", f"Off-diagonal increase when both terms are removed: {_fmt(doc['off_diagonal_increase'])} "
               f"(`{name}#/off_diagonal_increase`).", ""]


def _sweep_section(name: str, doc: dict) -> list:
    kind = doc["kind"]
    if kind == "sweep_steps":
        rows = [[r["model"], r["steps"], _fmt(r["report"]["mean"]), _fmt(r["report"]["p"]), f"`{name}#/rows/{i}`"]
                for i, r in enumerate(doc["rows"])]
        body = _table(["model", "verification steps", "mean BA", "p", "ref"], rows)
    elif kind == "sweep_payload":
        rows = [[r["k"], f"{r['codec_exact']}/{r['codec_trials']}", _fmt(r["target_mean_ba"]), f"`{name}#/rows/{i}`"]
                for i, r in enumerate(doc["rows"])]
        body = _table(["k", "codec exact", "target mean BA", "ref"], rows)
    else:
        rows = [[r["model"], _fmt(r["eta"]), _fmt(r["report"]["mean"]), _fmt(r["report"]["p"]), f"`{name}#/rows/{i}`"]
                for i, r in enumerate(doc["rows"])]
        body = _table(["model", "eta", "mean BA", "p", "ref"], rows)
    return [f"### Sweep ({kind[6:]}): `{name}`", ""] + body + [""]


def _verification_rows(found: list) -> list:
    if not found:
        return []
    # full precision: these rows transcribe the report values exactly
    rows = [[d["report"]["suspect_model_id"], d["report"]["n"], _exact(d["report"]["mean"]),
             _exact(d["report"]["std"]), _exact(d["report"]["t"]), _exact(d["report"]["p"]), d["report"]["verdict"],
             f"`{name}#/report`"] for name, d in found]
    return ["### Single verifications", ""] \
        + _table(["suspect", "N", "mean BA", "std", "t", "p", "verdict", "ref"], rows) + [""]


def summarize(run_dir) -> tuple[str, list]:
    """Return (markdown, problems). Only top-level JSON documents with a known ``kind`` are summarized."""
    run_dir = Path(run_dir)
    docs, problems = [], []
    paths = sorted(run_dir.glob("*.json")) if run_dir.is_dir() else []
    if not run_dir.is_dir():
        problems.append(f"{run_dir}: directory does not exist")
    for path in paths:
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            problems.append(f"{path.name}: unreadable ({e.__class__.__name__})")
            continue
        if isinstance(doc, dict) and doc.get("kind") in KNOWN_KINDS:
            docs.append((path.name, doc))

    sections = {"matrix": [], "robustness": [], "ablation": [], "sweep": [], "verification": []}
    builders = {"matrix": _matrix_section, "robustness": _robustness_section, "ablation": _ablation_section}
    verifications = []
    n = 0
    for name, doc in docs:
        kind = doc["kind"]
        try:
            if kind == "verification":
                _verification_rows([(name, doc)])
                verifications.append((name, doc))
            elif kind.startswith("sweep_"):
                sections["sweep"] += _sweep_section(name, doc)
            else:
                sections[kind] += builders[kind](name, doc)
            n += 1
        except (KeyError, TypeError, IndexError, ValueError) as e:
            problems.append(f"{name}: malformed {kind} document (missing {e})")
    sections["verification"] = _verification_rows(verifications)

    hashes = sorted({d.get("config_hash") for _, d in docs if d.get("config_hash")})
    lines = ["# Run summary", "", f"Directory: `{run_dir}`", f"Experiments summarized: {n}",
             f"Config hashes: {', '.join(hashes) if hashes else '-'}", ""]
    for key, title in (("matrix", "Verification matrices"), ("robustness", "Robustness"),
                       ("ablation", "Ablation"), ("sweep", "Sweeps"), ("verification", "Verifications")):
        if sections[key]:
            lines += [f"## {title}", ""] + sections[key]
    if problems:
        lines += ["## Problems", ""] + [f"- {p}" for p in problems] + [""]
    return "\n".join(lines).rstrip() + "\n", problems
