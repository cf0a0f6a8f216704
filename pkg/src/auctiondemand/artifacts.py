"""Checkpoint bundles, run manifests, and delimited artifact writers shared
by the CLI and the test suite."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, config_hash, config_to_dict
from .encoder import Encoder, FeatureSchema
from .errors import DataError
from .nn import load_checkpoint, save_checkpoint
from .stage2 import Decoder
from .stage1 import Stage1Result


def schema_to_meta(schema: FeatureSchema) -> dict:
    return {f.name: config_like(getattr(schema, f.name)) for f in fields(schema)}


def config_like(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def schema_from_meta(meta: dict) -> FeatureSchema:
    kwargs = dict(meta)
    kwargs["brands"] = tuple(kwargs["brands"])
    kwargs["body_styles"] = tuple(kwargs["body_styles"])
    return FeatureSchema(**kwargs)


def save_stage1(path, result: Stage1Result) -> None:
    save_checkpoint(
        path,
        {
            "encoder": (result.encoder.spec, result.encoder.state),
            "head": (result.head_spec, result.head_state),
        },
        meta={"schema": schema_to_meta(result.encoder.schema), "training": result.metadata},
    )


def load_stage1(path) -> tuple[Encoder, tuple, dict]:
    """Returns (encoder, (head_spec, head_state), training metadata)."""
    networks, meta = load_checkpoint(path)
    if "encoder" not in networks or "head" not in networks:
        raise DataError(f"{path}: not an outcome-encoding checkpoint")
    schema = schema_from_meta(meta["schema"])
    spec, state = networks["encoder"]
    return Encoder(schema, spec, state), networks["head"], meta.get("training", {})


def save_direct(path, result) -> None:
    """Persist a jointly trained encoder + decoder bundle."""
    decoder = result.decoder
    save_checkpoint(
        path,
        {
            "encoder": (result.encoder.spec, result.encoder.state),
            "trunk": (decoder.trunk_spec, decoder.trunk_state),
            "head_v": (decoder.head_v_spec, decoder.head_v_state),
            "head_n": (decoder.head_n_spec, decoder.head_n_state),
        },
        meta={
            "schema": schema_to_meta(result.encoder.schema),
            "kappa": decoder.config.kappa,
            "n_min": decoder.config.n_min,
            "n_max": decoder.config.n_max,
            "j_max": decoder.config.j_max,
            "training": result.metadata,
        },
    )


def load_direct(path) -> tuple[Encoder, Decoder, dict]:
    networks, meta = load_checkpoint(path)
    needed = {"encoder", "trunk", "head_v", "head_n"}
    if not needed.issubset(networks):
        raise DataError(f"{path}: not a joint encoder+decoder checkpoint")
    schema = schema_from_meta(meta["schema"])
    enc_spec, enc_state = networks["encoder"]
    encoder = Encoder(schema, enc_spec, enc_state)
    from .stage2 import DecoderConfig

    trunk_spec, trunk_state = networks["trunk"]
    config = DecoderConfig(
        q=trunk_spec.layer_dims[0],
        kappa=int(meta["kappa"]),
        n_min=int(meta["n_min"]),
        n_max=int(meta["n_max"]),
        hidden=tuple(trunk_spec.layer_dims[1:]),
        j_max=int(meta["j_max"]),
    )
    decoder = Decoder(
        config, trunk_spec, trunk_state,
        networks["head_v"][0], networks["head_v"][1],
        networks["head_n"][0], networks["head_n"][1],
    )
    return encoder, decoder, meta.get("training", {})


def write_history_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in history:
            fh.write(f"{epoch},{step},{loss!r}\n")


def write_metadata(path, metadata: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(metadata):
            fh.write(f"{key}={metadata[key]}\n")


def write_manifest(directory, command: str, config: RunConfig, arguments: dict) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "seed": config.seed,
        "arguments": {k: config_like(v) for k, v in sorted(arguments.items())},
        "versions": {
            "auctiondemand": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    path = Path(directory) / "run_manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
