"""Command line front end.

Every subcommand is a thin client of the HTTP service: by default it
talks to an in-process app instance, and with --server it sends the same
requests to a running `explore serve` elsewhere.  Outputs land wherever
the service runs, so with a remote server keep paths meaningful there.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import click
import yaml


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
    return resp.json()


@click.group()
def main():
    """Deterministic exploration sweeps over seeded grid arenas."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--episodes", type=int, default=None, help="override run.n_episodes")
@click.option("--seed", type=int, default=None, help="override run.seed_base")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="override run.output_dir")
@click.option("--jobs", type=int, default=None, help="override run.parallelism")
@click.option("--trace/--no-trace", default=None, help="override run.traces")
@click.option("--server", default=None, help="base URL of a running service")
def run(config_path, episodes, seed, out, jobs, trace, server):
    """Run the sweep described by a YAML config file."""
    with open(config_path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise click.ClickException("config root must be a mapping")
    overrides = {
        "n_episodes": episodes,
        "seed_base": seed,
        "output_dir": out,
        "parallelism": jobs,
        "traces": trace,
    }
    run_section = raw.setdefault("run", {}) or {}
    for key, value in overrides.items():
        if value is not None:
            run_section[key] = value
    raw["run"] = run_section

    data = _post(_client(server), "/evaluation/run", {"config": raw})
    report = data["report"]
    agg = report["aggregate"]
    click.echo(f"wrote {data['output_dir']}  (not found: {agg['not_found']})")
    for name in ("rer", "pe", "steps", "overlap", "bandwidth_mib", "coverage"):
        mean, std = agg["mean"][name], agg["std"][name]
        if mean is None:
            click.echo(f"  {name:<14} {'n/a':>10}")
        else:
            click.echo(f"  {name:<14} {mean:10.3f} +- {std:.3f}")


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "json_out", type=click.Path(dir_okay=False), default=None, help="also write the comparison as JSON")
@click.option("--server", default=None, help="base URL of a running service")
def compare(reports, json_out, server):
    """Compare two or more run reports; ratios are against the first."""
    if server:
        payloads = [json.load(open(p)) for p in reports]
        data = _post(_client(server), "/report/compare", {"payloads": payloads})
    else:
        data = _post(_client(None), "/report/compare", {"report_paths": list(reports)})
    click.echo(data["text"])
    if json_out:
        with open(json_out, "w") as fh:
            json.dump(data["comparison"], fh, indent=2, sort_keys=True)
            fh.write("\n")


@main.command()
@click.argument("trace", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="renders", help="directory for the PNGs")
@click.option("--server", default=None, help="base URL of a running service")
def render(trace, out, server):
    """Render a JSONL episode trace into heatmap PNGs."""
    data = _post(_client(server), "/render/heatmap", {"trace_path": str(trace), "out_dir": str(out)})
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, blob in data["images"].items():
        (out_dir / name).write_bytes(base64.b64decode(blob))
    for name in data["images"]:
        click.echo(str(out_dir / name))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Serve the HTTP API."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
