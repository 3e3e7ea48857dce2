"""Regenerate the golden encodings. Only run this on a deliberate protocol change."""
from pathlib import Path

import numpy as np

from bbtune import wire

HERE = Path(__file__).parent


def golden_request() -> wire.InferenceRequest:
    return wire.InferenceRequest(
        input_ids=np.array([[3, 17, 1], [3, 40, 2]]),
        attention_mask=np.array([[1, 1, 1], [1, 1, 0]], bool),
        mask_pos=np.array([2, 1]),
        label_ids=np.array([4, 5]),
        prompt_kind=wire.PromptKind.DEEP_SUBSPACE,
        prompt=np.array([[[0.5, -1.25]], [[2.0, 0.0]]], np.float32),
        projections=(wire.ProjectionSpec("normal", 7, 0.125), wire.ProjectionSpec("uniform", 8, 0.5)),
        prompt_seed=9,
        request_id=258,
    )


def golden_response() -> wire.InferenceResponse:
    return wire.InferenceResponse(np.array([[1.5, -2.0], [0.25, 3.0]], np.float32), 258)


if __name__ == "__main__":
    (HERE / "infer_request_v1.bin").write_bytes(wire.frame(wire.encode_request(golden_request())))
    (HERE / "infer_response_v1.bin").write_bytes(wire.frame(wire.encode_response(golden_response())))
