"""Operator command line: corpus generation, calibration, evaluation runs,
scenario replays, store maintenance, and the HTTP server.

Every subcommand is deterministic given its flags.  When --seed is omitted a
random one is drawn and printed, so any ad-hoc run can be reproduced by
pinning the printed value.  Exit codes: 2 for flag/validation problems, 3
when an evaluation lacks the impostor pairs to resolve its FMR target, 4
when the serve port is already bound.
"""

from __future__ import annotations

import errno
import json
import secrets
import socket
import sys
from pathlib import Path
from typing import Optional

import click

from .lifecycle import PER_INSTANCE, SHARED
from .metrics import InsufficientImpostorsError
from .simulate import (
    DEFAULT_SIGMA,
    SimWorldConfig,
    UnreachableError,
    calibrate_sigma,
    read_corpus_config,
    write_corpus,
)

EXIT_INSUFFICIENT_IMPOSTORS = 3
EXIT_PORT_IN_USE = 4


def _resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    drawn = secrets.randbelow(2**32)
    click.echo(f"seed: {drawn} (pass --seed {drawn} to reproduce)", err=True)
    return drawn


def _parse_multipliers(text: Optional[str]) -> dict:
    """'g1=1.0,g2=1.3' -> {'g1': 1.0, 'g2': 1.3}"""
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        label, _, value = part.partition("=")
        if not label or not value:
            raise click.UsageError(
                f"bad group multiplier {part!r}; expected label=factor pairs"
            )
        try:
            out[label.strip()] = float(value)
        except ValueError:
            raise click.UsageError(f"multiplier for {label!r} is not a number") from None
    return out


def _sim_options(fn):
    for option in reversed(
        (
            click.option("--identities", type=click.IntRange(min=1), default=200,
                         show_default=True, help="Identities in the synthetic world."),
            click.option("--images", type=click.IntRange(min=1), default=4,
                         show_default=True, help="Images per identity."),
            click.option("--instances", type=click.IntRange(min=1), default=10,
                         show_default=True, help="Matcher instances."),
            click.option("--dim", type=click.IntRange(min=8), default=512,
                         show_default=True, help="Embedding dimension."),
            click.option("--sigma", type=float, default=None,
                         help=f"Within-identity noise scale [default: {DEFAULT_SIGMA}]."),
            click.option("--group-multipliers", default=None, metavar="G=F,...",
                         help="Per-group noise multipliers, e.g. g1=1.0,g2=1.3."),
            click.option("--seed", type=int, default=None,
                         help="Master seed [default: random, printed]."),
        )
    ):
        fn = option(fn)
    return fn


def _build_config(identities, images, instances, dim, sigma, group_multipliers, seed) -> SimWorldConfig:
    try:
        return SimWorldConfig(
            num_identities=identities,
            images_per_identity=images,
            num_instances=instances,
            dim=dim,
            sigma=DEFAULT_SIGMA if sigma is None else sigma,
            group_noise_multipliers=_parse_multipliers(group_multipliers),
            master_seed=_resolve_seed(seed),
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _load_corpus(corpus_dir: str):
    from .evaluate import Corpus

    directory = Path(corpus_dir)
    try:
        config, _ = read_corpus_config(directory)
    except Exception as exc:
        raise click.UsageError(f"unusable corpus directory {corpus_dir}: {exc}") from exc
    return Corpus.from_records(directory / "corpus.jsonl", config=config)


def _corpus_from_flags(corpus_dir, identities, images, instances, dim, sigma,
                       group_multipliers, seed):
    from .evaluate import Corpus

    if corpus_dir is not None:
        return _load_corpus(corpus_dir)
    config = _build_config(identities, images, instances, dim, sigma,
                           group_multipliers, seed)
    return Corpus.from_config(config)


def _emit(document: str, out: Optional[str]) -> None:
    if out is None:
        click.echo(document, nl=False)
    else:
        Path(out).write_text(document, encoding="utf-8")


@click.group()
def main() -> None:
    """Revocable biometric template toolkit."""


@main.command()
@_sim_options
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for corpus.jsonl and its config sidecar.")
def simulate(identities, images, instances, dim, sigma, group_multipliers, seed, out):
    """Generate a synthetic embedding corpus."""
    config = _build_config(identities, images, instances, dim, sigma,
                           group_multipliers, seed)
    corpus_path, config_path = write_corpus(config, out)
    records = identities * images * instances
    click.echo(f"wrote {records} records to {corpus_path}")
    click.echo(f"config digest {config.digest()} ({config_path})")


@main.command()
@_sim_options
@click.option("--target-dprime", type=float, default=7.0, show_default=True,
              help="Same-instance separation to calibrate sigma for.")
def calibrate(identities, images, instances, dim, sigma, group_multipliers, seed,
              target_dprime):
    """Solve for the noise scale that yields a target d-prime."""
    config = _build_config(identities, images, instances, dim, sigma,
                           group_multipliers, seed)
    try:
        solved = calibrate_sigma(config, target_dprime)
    except UnreachableError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"sigma: {solved!r}")


@main.command()
@_sim_options
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Evaluate an existing corpus directory instead of simulating.")
@click.option("--fmr", type=float, default=1e-4, show_default=True,
              help="FMR target for per-instance thresholds.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the matrix here instead of stdout.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
def matrix(identities, images, instances, dim, sigma, group_multipliers, seed,
           corpus_dir, fmr, out, fmt):
    """Instance relationship matrix: same-instance separation on the diagonal,
    cross-instance acceptance off it."""
    from .evaluate import relationship_matrix

    corpus = _corpus_from_flags(corpus_dir, identities, images, instances, dim,
                                sigma, group_multipliers, seed)
    try:
        result = relationship_matrix(corpus, fmr)
    except InsufficientImpostorsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INSUFFICIENT_IMPOSTORS)
    _emit(result.to_json() if fmt == "json" else result.to_csv(), out)
    s = result.summary()
    click.echo(
        "min diagonal threshold {min_diagonal_threshold:.6f}  "
        "max off-diagonal genuine {max_cross_genuine:.6f}  "
        "worst accept rate {worst_accept_rate:.3g}".format(**s)
    )


@main.command()
@_sim_options
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Evaluate an existing corpus directory instead of simulating.")
@click.option("--folds", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the report here instead of stdout.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
def report(identities, images, instances, dim, sigma, group_multipliers, seed,
           corpus_dir, folds, out, fmt):
    """Per-instance accuracy and d-prime consistency report."""
    from .evaluate import consistency_report

    corpus = _corpus_from_flags(corpus_dir, identities, images, instances, dim,
                                sigma, group_multipliers, seed)
    result = consistency_report(corpus, folds=folds)
    _emit(result.to_json() if fmt == "json" else result.to_csv(), out)
    click.echo(
        f"accuracy {result.accuracy_mean:.4f} +/- {result.accuracy_std:.4f}  "
        f"d-prime {result.d_prime_mean:.4f} +/- {result.d_prime_std:.4f}"
    )


@main.command()
@click.option("--preset", type=click.Choice(["steal-revoke-replay", "steal-no-revoke",
                                             "revoke-no-steal"]),
              required=True, help="Attack/recovery sequence to run.")
@click.option("--identities", type=click.IntRange(min=2), default=200, show_default=True)
@click.option("--instances", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--dim", type=click.IntRange(min=8), default=512, show_default=True)
@click.option("--sigma", type=float, default=None,
              help=f"Within-identity noise scale [default: {DEFAULT_SIGMA}].")
@click.option("--fmr", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=None,
              help="Master seed [default: random, printed].")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the scenario report here instead of stdout.")
def scenario(preset, identities, instances, dim, sigma, fmr, seed, out):
    """Replay a steal/revoke scenario and report attacker vs legitimate accepts."""
    from .evaluate import (
        ScenarioReferencesUnknownIdentityError,
        build_scenario,
        run_scenario,
    )

    try:
        plan = build_scenario(
            preset,
            num_identities=identities,
            master_seed=_resolve_seed(seed),
            num_instances=instances,
            dim=dim,
            sigma=sigma,
            fmr_target=fmr,
        )
    except (ValueError, ScenarioReferencesUnknownIdentityError) as exc:
        raise click.UsageError(str(exc)) from exc
    report_ = run_scenario(plan)
    _emit(report_.to_json(), out)
    click.echo(
        f"attacker accepts {report_.attacker_accepts}/{report_.attacker_replays}  "
        f"legitimate after {report_.legit_accept_after}/{report_.identities}  "
        f"non-interference {'ok' if report_.non_interference_ok else 'VIOLATED'}"
    )


@main.command()
@click.option("--store", "store_dir", required=False, envvar="RBT_STORE_DIR",
              type=click.Path(file_okay=False),
              help="Durable store directory [env RBT_STORE_DIR].")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=click.IntRange(min=0, max=65535), default=8000,
              show_default=True, envvar="RBT_PORT",
              help="TCP port; 0 binds an ephemeral port and prints it [env RBT_PORT].")
@click.option("--threshold-mode", type=click.Choice([PER_INSTANCE, SHARED]),
              default=PER_INSTANCE, show_default=True, envvar="RBT_THRESHOLD_MODE")
@click.option("--fmr", type=float, default=1e-4, show_default=True,
              help="FMR target used when a fresh store calibrates thresholds.")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Serve a file-extractor world from this corpus directory.")
@_sim_options
def serve(store_dir, host, port, threshold_mode, fmr, corpus_dir,
          identities, images, instances, dim, sigma, group_multipliers, seed):
    """Run the HTTP service (admin token from RBT_ADMIN_TOKEN)."""
    import os

    import uvicorn

    from .service import PersistentStore, create_app

    if store_dir is None:
        raise click.UsageError("--store (or RBT_STORE_DIR) is required")

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            click.echo(f"error: {host}:{port} is already in use", err=True)
            sys.exit(EXIT_PORT_IN_USE)
        raise click.ClickException(str(exc)) from exc
    bound_port = sock.getsockname()[1]
    click.echo(f"listening on http://{host}:{bound_port}")

    config = None
    if corpus_dir is None and not (Path(store_dir) / "world.json").exists():
        config = _build_config(identities, images, instances, dim, sigma,
                               group_multipliers, seed)
    store = PersistentStore(
        store_dir,
        config=config,
        corpus_path=None if corpus_dir is None else Path(corpus_dir) / "corpus.jsonl",
        threshold_mode=threshold_mode,
        fmr_target=fmr,
    )
    app = create_app(store, admin_token=os.environ.get("RBT_ADMIN_TOKEN"))
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning"))
    try:
        server.run(sockets=[sock])
    except KeyboardInterrupt:
        pass  # uvicorn re-raises the SIGINT it already shut down on


@main.group()
def store() -> None:
    """Maintain a durable store directory."""


def _open_store(store_dir: str):
    from .service import PersistentStore

    if not (Path(store_dir) / "world.json").exists():
        raise click.UsageError(f"{store_dir} is not a store directory (no world.json)")
    return PersistentStore(store_dir, bootstrap=False)


@store.command()
@click.option("--store", "store_dir", required=True, envvar="RBT_STORE_DIR",
              type=click.Path(exists=True, file_okay=False))
def snapshot(store_dir):
    """Roll the store to a fresh snapshot generation."""
    handle = _open_store(store_dir)
    try:
        generation = handle.snapshot()
    finally:
        handle.close(take_snapshot=False)
    click.echo(f"snapshot generation {generation}")


@store.command()
@click.option("--store", "store_dir", required=True, envvar="RBT_STORE_DIR",
              type=click.Path(exists=True, file_okay=False))
def inspect(store_dir):
    """Print store contents as JSON (never includes template vectors)."""
    handle = _open_store(store_dir)
    registry = handle.registry
    view = {
        "generation": handle.generation,
        "dimension": registry.dimension,
        "instances": [
            {
                "id": rec.id,
                "index": rec.index,
                "status": rec.status,
                "threshold": None if rec.threshold is None else rec.threshold.threshold,
            }
            for rec in registry.instances()
        ],
        "identities": {
            identity: {
                "instance": registry.lookup(identity).active_instance,
                "revocation_count": registry.lookup(identity).revocation_count,
            }
            for identity in registry.identity_ids()
        },
    }
    handle.close(take_snapshot=False)
    click.echo(json.dumps(view, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
