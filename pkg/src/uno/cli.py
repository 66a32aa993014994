"""Command-line entry point.

Verbs: sim, run, report, route, serve, theory, evolve.
Exit codes: 0 success, 1 user error (bad config, missing files), 2 backend
error (unreachable or misbehaving model service).
"""

from __future__ import annotations

import json
import logging
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import click

from . import __version__
from .backends.base import BackendError
from .config import ConfigError, load_config
from .evolution import evolve as run_evolution
from .ingest import IngestError
from .pipeline import Pipeline, PipelineError, make_backends, report as build_report
from .router import route_and_respond
from .serde import canonical_pretty
from .simulator import SimSpec, generate, write_log_and_key
from .store import ArtifactStore, StoreError
from .theory import run_all_checks

logger = logging.getLogger(__name__)


@click.group()
@click.version_option(version=__version__, prog_name="uno")
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def sim(spec_path: Path, out_dir: Path) -> None:
    """Generate a synthetic session log plus its sealed answer key."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(spec_path, "rb") as fh:
        raw = tomllib.load(fh)
    spec = SimSpec.from_dict(raw)
    corpus = generate(spec)
    log_path, key_path = write_log_and_key(corpus, out_dir)
    click.echo(f"wrote {len(corpus.sessions)} sessions -> {log_path}")
    click.echo(f"sealed answer key -> {key_path}")


@cli.command()
@click.argument("stage", default="all")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path))
@click.option("--logs", "log_path", type=click.Path(exists=True, path_type=Path), default=None)
def run(stage: str, config_path: Path, store_path: Path, log_path: Path | None) -> None:
    """Run pipeline stages (ingest, distill, cluster, assess, build, or all)."""
    config = load_config(config_path)
    store = ArtifactStore(store_path)
    pipeline = Pipeline(
        config=config, store=store, backends=make_backends(config), log_path=log_path
    )
    executed = pipeline.run(stage)
    if executed:
        click.echo(f"executed stages: {', '.join(executed)}")
    else:
        click.echo("all requested stages already complete (no-op)")


@cli.command("report")
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path))
@click.option("--json", "json_out", type=click.Path(path_type=Path), default=None)
def report_cmd(store_path: Path, json_out: Path | None) -> None:
    """Summarize clusters, gaps, statuses, and adapters in a store."""
    text, summary = build_report(ArtifactStore(store_path))
    click.echo(text)
    if json_out is not None:
        json_out.parent.mkdir(parents=True, exist_ok=True)
        json_out.write_text(canonical_pretty(summary) + "\n", encoding="utf-8")


@cli.command()
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
def route(queries_path: Path, store_path: Path, out_path: Path, config_path: Path) -> None:
    """Answer a file of queries through the routed experience modules."""
    config = load_config(config_path)
    store = ArtifactStore(store_path)
    clusters = store.load_final_clusters() if store.has("adapters/clusters_final.jsonl") else ()
    backends = make_backends(config)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    traces_dir = store.path("reports/traces")
    traces_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(queries_path, "r", encoding="utf-8") as qf, open(out_path, "w", encoding="utf-8") as out:
        for line_no, line in enumerate(qf, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            qid = str(record.get("id", f"q-{line_no:06d}"))
            result = route_and_respond(
                qid, record["query"], backends.embed, clusters, backends.chat, config.engine
            )
            out.write(json.dumps(result.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            (traces_dir / f"{qid}.json").write_text(
                canonical_pretty(result.to_dict()) + "\n", encoding="utf-8"
            )
            n += 1
    click.echo(f"routed {n} queries -> {out_path}")


def _make_respond_server(port: int, clusters, backends, engine_config) -> ThreadingHTTPServer:
    class RespondHandler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet
            logger.debug("serve: " + fmt, *args)

        def do_POST(self):  # noqa: N802 (stdlib naming)
            if self.path != "/respond":
                self.send_error(404, "no such endpoint")
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
                query = body["query"]
            except (ValueError, KeyError):
                self.send_error(400, "body must be JSON with a 'query' field")
                return
            result = route_and_respond(
                str(body.get("id", "adhoc")), query, backends.embed, clusters, backends.chat, engine_config
            )
            payload = {
                "response": result.response,
                "path": result.decision.path.value,
                "cluster": result.decision.chosen_cluster,
                "trace": [t.to_dict() for t in result.trace],
            }
            data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return ThreadingHTTPServer(("127.0.0.1", port), RespondHandler)


@cli.command()
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--port", default=8080, type=int)
def serve(store_path: Path, config_path: Path, port: int) -> None:
    """Expose POST /respond over HTTP for integration tests."""
    config = load_config(config_path)
    store = ArtifactStore(store_path)
    clusters = store.load_final_clusters() if store.has("adapters/clusters_final.jsonl") else ()
    server = _make_respond_server(port, clusters, make_backends(config), config.engine)
    click.echo(f"serving POST /respond on 127.0.0.1:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@cli.command()
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@click.option("--seed", default=0, type=int)
@click.option("--noise-configs", default=50, type=int)
@click.option("--variance-runs", default=100, type=int)
def theory(out_path: Path | None, seed: int, noise_configs: int, variance_runs: int) -> None:
    """Run the synthetic checks of the noise-risk and variance bounds."""
    results = run_all_checks(seed=seed, noise_configs=noise_configs, variance_runs=variance_runs)
    click.echo(f"noise risk bound: {'pass' if results['noise_risk_bound']['all_passed'] else 'FAIL'}")
    click.echo(
        f"variance reduction: {'pass' if results['variance_reduction']['all_passed'] else 'FAIL'} "
        f"({results['variance_reduction']['clusters_checked']} clusters)"
    )
    click.echo(
        "negative control: "
        + ("violation detected (expected)" if results["variance_negative_control"]["detected"] else "FAIL")
    )
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(canonical_pretty(results) + "\n", encoding="utf-8")
    if not results["all_passed"]:
        raise SystemExit(1)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_path", required=True, type=click.Path(path_type=Path))
@click.option("--new-logs", "new_logs", required=True, type=click.Path(exists=True, path_type=Path))
def evolve(config_path: Path, store_path: Path, new_logs: Path) -> None:
    """Fold a new batch of logs into an existing store."""
    config = load_config(config_path)
    store = ArtifactStore(store_path)
    report = run_evolution(store, new_logs, config, make_backends(config))
    click.echo(
        f"clusters {report.clusters_before} -> {report.clusters_after}; "
        f"{'adopted new clustering' if report.adopted_new_clustering else 'kept original centroids'}; "
        f"{report.new_pairs} new pairs"
    )
    for action in report.actions:
        click.echo(f"  cluster {action.cluster_id}: {action.action} {action.detail}")


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except BackendError as exc:
        click.echo(f"backend error: {exc}", err=True)
        sys.exit(2)
    except (ConfigError, IngestError, PipelineError, StoreError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
