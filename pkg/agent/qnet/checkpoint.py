import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .mlp import DimensionMismatchError, MlpParams
from .qnet_agent import AgentHyperparams, knob_choices, network_dims

FORMAT_VERSION = 1

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: MlpParams, hyper: AgentHyperparams, r: int) -> Path:
    path = Path(path)
    if not path.parent.exists():
        path.parent.mkdir(parents=True)
    document = {
        "format_version": FORMAT_VERSION,
        "r": r,
        "layer_dims": list(params.layer_dims),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "hyperparams": hyper.as_dict(),
    }
    # float repr round-trips exactly through json
    path.write_text(json.dumps(document))
    logger.info(f"Saved r={r} checkpoint to {path}")
    return path


def load_checkpoint(path, expected_r: Optional[int] = None) -> tuple[MlpParams, AgentHyperparams, int]:
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}")

    try:
        version = document["format_version"]
        r = int(document["r"])
        layer_dims = tuple(document["layer_dims"])
        hyper = AgentHyperparams.from_dict(document["hyperparams"])
        params = MlpParams(
            weights=[np.array(w, dtype=np.float64) for w in document["weights"]],
            biases=[np.array(b, dtype=np.float64) for b in document["biases"]],
            knob_choices=knob_choices(hyper),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}")

    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    if params.layer_dims != layer_dims or layer_dims != network_dims(r, hyper):
        raise CheckpointError(f"Checkpoint layer dims {layer_dims} are inconsistent with r={r}")
    if expected_r is not None and r != expected_r:
        raise DimensionMismatchError(f"Checkpoint was trained for r={r}, environment has r={expected_r}")
    return params, hyper, r
