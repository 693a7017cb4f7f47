from pathlib import Path
from typing import Any, Dict, List, Optional

import jinja2
import pandas as pd

# Setup logging
import logging

logger = logging.getLogger("spatialib")

MODES = ("baseline", "sib")

REPORT_TEMPLATE = """# SpatialIB report

Dataset `{{ dataset }}`, {{ config.classes }} classes, {{ config.side }}px, seeds {{ config.seeds | join(", ") }}.

## Variance bound

{{ sweep.cases }} random covariances (d <= 8, sigma in {0.1, 1}): {{ sweep.violations }} violation(s).
lhs / rhs ranges from {{ "%.4f" | format(sweep.min_ratio) }} to {{ "%.4f" | format(sweep.max_ratio) }}.

## Linear sufficiency

{{ sufficiency.recovered }} of {{ sufficiency.cases }} full-rank instances recovered the posterior,
max residual {{ "%.3e" | format(sufficiency.max_residual) }}; {{ sufficiency.deficient_reported }} of
{{ sufficiency.deficient_cases }} rank-deficient constructions reported as violated.
{% if quadrants %}

## Mutual-information quadrants

| mode | seed | X_fg / R_fg | X_bg / R_bg | X_fg / R_bg | X_bg / R_fg | cross / within |
|---|---|---|---|---|---|---|
{% for row in quadrants -%}
| {{ row.mode }} | {{ row.seed }} | {{ "%.4f" | format(row.fg_fg) }} | {{ "%.4f" | format(row.bg_bg) }} | {{ "%.4f" | format(row.fg_bg) }} | {{ "%.4f" | format(row.bg_fg) }} | {{ "%.3f" | format(row.cross_ratio) }} |
{% endfor %}
{%- endif %}
{% if differential %}

## Information differential

Per-image dependence difference (foreground minus background), exponentiated z-scores.
The per-model column normalizes within each model, the pooled column over both modes of a seed.

| mode | seed | mean difference | mean exp(z), per model | mean exp(z), pooled |
|---|---|---|---|---|
{% for row in differential -%}
| {{ row.mode }} | {{ row.seed }} | {{ "%.4f" | format(row["diff"]) }} | {{ "%.3f" | format(row.info_differential) }} | {{ "%.3f" | format(row.info_differential_pooled) }} |
{% endfor %}
{%- endif %}
{% if comparison %}

## Baseline vs S-IB (median over seeds)

| metric | method | baseline | sib | change |
|---|---|---|---|---|
{% for row in comparison -%}
| {{ row.metric }} | {{ row.method }} | {{ "%.4f" | format(row.baseline) }} | {{ "%.4f" | format(row.sib) }} | {{ "%+.4f" | format(row.change) }} |
{% endfor %}
{%- else %}

No evaluated baseline/sib pair found, run `spatialib eval` for both modes first.
{% endif %}
"""


def collect(out_dir: Path, stem: str, seeds: List[int]) -> pd.DataFrame:
    """Concatenate ``{stem}_{mode}_seed{seed}.csv`` files that exist."""
    frames = []
    for mode in MODES:
        for seed in seeds:
            path = Path(out_dir) / f"{stem}_{mode}_seed{seed}.csv"
            if path.is_file():
                frames.append(pd.read_csv(path))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def comparison_table(out_dir: Path, seeds: List[int]) -> pd.DataFrame:
    """Median over seeds of every evaluated metric, baseline next to sib."""
    long_rows = []
    for stem, metrics in (
        ("localization", ["pixel_acc", "miou", "map"]),
        ("faithfulness", ["insertion_auc", "deletion_auc"]),
        ("accuracy", ["top1", "topk"]),
    ):
        frame = collect(out_dir, stem, seeds)
        if frame.empty:
            continue
        if "method" not in frame:
            frame = frame.assign(method="-")
        melted = frame.melt(id_vars=["mode", "seed", "method"], value_vars=metrics, var_name="metric")
        long_rows.append(melted)
    if not long_rows:
        return pd.DataFrame(columns=["metric", "method", "baseline", "sib", "change"])
    frame = pd.concat(long_rows, ignore_index=True)
    medians = frame.groupby(["metric", "method", "mode"], sort=False)["value"].median().unstack("mode")
    if not set(MODES) <= set(medians.columns):
        return pd.DataFrame(columns=["metric", "method", "baseline", "sib", "change"])
    table = medians[list(MODES)].dropna().reset_index()
    table["change"] = table["sib"] - table["baseline"]
    return table[["metric", "method", "baseline", "sib", "change"]]


def render_report(
    config: Any,
    dataset: str,
    sweep: Any,
    sufficiency: Dict[str, Any],
    quadrants: Optional[pd.DataFrame] = None,
    differential: Optional[pd.DataFrame] = None,
    comparison: Optional[pd.DataFrame] = None,
) -> str:
    """Render the markdown report."""

    def records(frame: Optional[pd.DataFrame]) -> List[Dict[str, Any]]:
        return [] if frame is None or frame.empty else frame.to_dict(orient="records")

    return jinja2.Template(REPORT_TEMPLATE).render(
        config=config,
        dataset=dataset,
        sweep=sweep,
        sufficiency=sufficiency,
        quadrants=records(quadrants),
        differential=records(differential),
        comparison=records(comparison),
    )
