"""Fixed tiny inputs for the pinned encoder outputs in tests/golden.

Run ``python tests/golden_cases.py`` to regenerate after an intentional
format change.
"""

from pathlib import Path

from texp.imaging import (
    encode_api_existence,
    encode_api_frequency,
    encode_api_sequence,
    encode_prediction_bitmap,
    write_image,
)
from texp.predictor import PredictionOutcomes
from texp.traces import BENIGN, ApiTrace

GOLDEN = Path(__file__).parent / "golden"

API_NAMES = ["CreateFileW", "CryptEncrypt", "CreateFileW", "HttpSendRequestW", "CreateFileW", "RegOpenKeyExW"]
API_VOCAB = ("CreateFileW", "CryptEncrypt", "HttpSendRequestW", "ReadFile", "RegOpenKeyExW")


def cases():
    api = ApiTrace.from_names("g", BENIGN, API_NAMES, API_VOCAB)
    return {
        "bitmap.pgm": ("prediction_bitmap", *encode_prediction_bitmap(PredictionOutcomes.from_correct("g", [1, 1, 0, 1]), 2)),
        "sequence.ppm": ("api_sequence", *encode_api_sequence(api, 4)),
        "existence.pgm": ("api_existence", *encode_api_existence(api)),
        "frequency.pgm": ("api_frequency", *encode_api_frequency(api)),
    }


def write_all(root=GOLDEN):
    root.mkdir(parents=True, exist_ok=True)
    for name, (encoder, image, prov) in cases().items():
        write_image(root / name, image, encoder, prov)


if __name__ == "__main__":
    write_all()
