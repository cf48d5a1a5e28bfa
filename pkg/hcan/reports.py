#!/usr/bin/env python3
"""
Report writers for seed and ablation summaries and other JSON documents.

Writers return ``{"success": bool, "file_path": str | None, "error": str | None}``
and log failures instead of raising.
"""

import json
import logging
from html import escape
from pathlib import Path
from typing import Any, Dict, List, Union

try:
    from jinja2 import Environment, Template
    JINJA2_AVAILABLE = True
except ImportError:
    JINJA2_AVAILABLE = False

logger = logging.getLogger(__name__)

REPORT_FORMATS = (".json", ".md", ".html")

MARKDOWN_TEMPLATE = """# {{ title }}

| Variant | Seeds | Test weighted F1 (mean) | Std | Failed |
|---------|-------|-------------------------|-----|--------|
{% for row in rows -%}
| {{ row.label }} | {{ row.seeds | join(', ') }} | {{ fmt(row.mean) }} | {{ fmt(row.std) }} | {{ row.failed }} |
{% endfor %}
{% if runs %}
## Runs

| Seed | Status | Test weighted F1 | Best val F1 | Epochs | Seconds |
|------|--------|------------------|-------------|--------|---------|
{% for run in runs -%}
| {{ run.seed }} | {{ 'ok' if run.success else 'failed: ' ~ run.error }} | {{ fmt(run.test_weighted_f1) }} | {{ fmt(run.best_val_f1) }} | {{ run.epochs_run }} | {{ '%.1f'|format(run.duration_sec) }} |
{% endfor %}
{% endif %}
"""

HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{{ title }}</title>
    <style>
        body { font-family: 'Segoe UI', Tahoma, Geneva, Verdana, sans-serif; max-width: 1000px; margin: 0 auto; padding: 20px; }
        table { border-collapse: collapse; width: 100%; margin-bottom: 20px; }
        th, td { border: 1px solid #ddd; padding: 6px 10px; text-align: left; }
        th { background: #f0f3f7; }
        .failed { color: #c0392b; }
    </style>
</head>
<body>
    <h1>{{ title }}</h1>
    <table>
        <tr><th>Variant</th><th>Seeds</th><th>Test weighted F1 (mean)</th><th>Std</th><th>Failed</th></tr>
        {% for row in rows %}
        <tr><td>{{ row.label }}</td><td>{{ row.seeds | join(', ') }}</td><td>{{ fmt(row.mean) }}</td><td>{{ fmt(row.std) }}</td><td>{{ row.failed }}</td></tr>
        {% endfor %}
    </table>
    {% if runs %}
    <h2>Runs</h2>
    <table>
        <tr><th>Seed</th><th>Status</th><th>Test weighted F1</th><th>Best val F1</th><th>Epochs</th><th>Seconds</th></tr>
        {% for run in runs %}
        <tr><td>{{ run.seed }}</td>
            <td{% if not run.success %} class="failed"{% endif %}>{{ 'ok' if run.success else 'failed: ' ~ run.error }}</td>
            <td>{{ fmt(run.test_weighted_f1) }}</td><td>{{ fmt(run.best_val_f1) }}</td>
            <td>{{ run.epochs_run }}</td><td>{{ '%.1f'|format(run.duration_sec) }}</td></tr>
        {% endfor %}
    </table>
    {% endif %}
</body>
</html>
"""


def fmt(value: Any) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _result(success: bool, file_path: Any = None, error: Any = None) -> Dict[str, Any]:
    return {"success": success, "file_path": None if file_path is None else str(file_path), "error": error}


def summary_view(doc: Dict[str, Any]) -> Dict[str, Any]:
    """Normalize an ``hcan-seeds-v1`` or ``hcan-ablation-v1`` document into rows and runs."""
    schema = doc.get("schema")
    if schema == "hcan-ablation-v1":
        return {"title": "Ablation results", "rows": doc["rows"], "runs": []}
    if schema == "hcan-seeds-v1":
        runs = doc["runs"]
        row = {
            "label": "HCAN",
            "seeds": [r["seed"] for r in runs],
            "mean": doc["mean_test_weighted_f1"],
            "std": doc["std_test_weighted_f1"],
            "failed": doc["failed"],
        }
        return {"title": "Multi-seed results", "rows": [row], "runs": runs}
    raise ValueError(f"cannot render a report for schema {schema!r}")


def render_summary(doc: Dict[str, Any], html: bool = False) -> str:
    view = summary_view(doc)
    if not JINJA2_AVAILABLE:
        return _render_summary_simple(view, html)
    if html:
        template = Environment(autoescape=True).from_string(HTML_TEMPLATE)
    else:
        template = Template(MARKDOWN_TEMPLATE)
    return template.render(fmt=fmt, **view)


def _render_summary_simple(view: Dict[str, Any], html: bool) -> str:
    """Plain rendering used when jinja2 is not installed."""
    lines: List[str] = []
    if html:
        lines.append(f"<!DOCTYPE html>\n<html><head><meta charset=\"UTF-8\"><title>{escape(view['title'])}</title></head><body>")
        lines.append(f"<h1>{escape(view['title'])}</h1><table>")
        lines.append("<tr><th>Variant</th><th>Seeds</th><th>Test weighted F1 (mean)</th><th>Std</th><th>Failed</th></tr>")
        for row in view["rows"]:
            seeds = ", ".join(str(s) for s in row["seeds"])
            lines.append(f"<tr><td>{escape(str(row['label']))}</td><td>{seeds}</td><td>{fmt(row['mean'])}</td>"
                         f"<td>{fmt(row['std'])}</td><td>{row['failed']}</td></tr>")
        lines.append("</table></body></html>")
        return "\n".join(lines)
    lines.append(f"# {view['title']}\n")
    lines.append("| Variant | Seeds | Test weighted F1 (mean) | Std | Failed |")
    lines.append("|---------|-------|-------------------------|-----|--------|")
    for row in view["rows"]:
        seeds = ", ".join(str(s) for s in row["seeds"])
        lines.append(f"| {row['label']} | {seeds} | {fmt(row['mean'])} | {fmt(row['std'])} | {row['failed']} |")
    return "\n".join(lines) + "\n"


def save_json(doc: Dict[str, Any], output_path: Union[str, Path]) -> Dict[str, Any]:
    try:
        path = Path(output_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote {doc.get('schema', 'document')} to {path}")
        return _result(True, path)
    except (OSError, TypeError, ValueError) as e:
        logger.error(f"Failed to write {output_path}: {e}")
        return _result(False, error=str(e))


def save_report(doc: Dict[str, Any], output_path: Union[str, Path]) -> Dict[str, Any]:
    """Write a summary as JSON, Markdown or HTML depending on the file suffix."""
    path = Path(output_path)
    suffix = path.suffix.lower()
    if suffix not in REPORT_FORMATS:
        error = f"unsupported report format '{suffix}' (expected one of {', '.join(REPORT_FORMATS)})"
        logger.error(error)
        return _result(False, error=error)
    if suffix == ".json":
        return save_json(doc, path)
    try:
        content = render_summary(doc, html=suffix == ".html")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        logger.info(f"Report saved to: {path}")
        return _result(True, path)
    except (OSError, KeyError, ValueError) as e:
        logger.error(f"Failed to save report {path}: {e}")
        return _result(False, error=str(e))
