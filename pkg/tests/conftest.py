"""Shared pytest hooks: a per-criterion acceptance summary.

Every ``test_aN_*`` test in test_acceptance.py implements one numbered
acceptance criterion; after the run a one-line PASS/FAIL verdict per
criterion is appended to the terminal summary, plus the recorded ablation
grid when it ran.
"""

from __future__ import annotations

CRITERIA = {
    "a1": "Gumbel-max sampling matches target class frequencies",
    "a2": "straight-through forward/backward contract",
    "a3": "layout GAN learning signal (hist-KL and distance improvement)",
    "a4": "conditional synthesis region-color fidelity",
    "a5": "Frechet distance oracle equivalence",
    "a6": "loss arithmetic matches hand-computed oracles",
    "a7": "seed-matched four-way fine-tuning ablation harness",
    "a8": "deterministic rerun reproduces metrics CSVs byte-identically",
}


def _criterion_of(nodeid: str) -> str | None:
    if "test_acceptance.py::test_a" not in nodeid:
        return None
    name = nodeid.rsplit("::", 1)[1]
    key = name.split("_")[1]
    return key if key in CRITERIA else None


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[str, str] = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL"), ("skipped", "SKIP")):
        for report in terminalreporter.stats.get(status, []):
            key = _criterion_of(getattr(report, "nodeid", ""))
            if key is not None:
                outcomes[key] = label
    if not outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(CRITERIA):
        verdict = outcomes.get(key, "NOT RUN")
        tr.write_line(f"{key.upper()}  {CRITERIA[key]}: {verdict}")
    rows = getattr(config, "_recorded_ablation", None)
    if rows:
        tr.write_line("recorded ablation grid (values informational):")
        for r in rows:
            tr.write_line(
                f"  {r['setting']:>6}: fid={r['fid']:.4f} "
                f"hist_kl={r['hist_kl']:.4f} steps={r['steps']} "
                f"seed={r['seed']}")
