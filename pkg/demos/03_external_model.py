"""Explaining a model texp did not train.

Any program that reads a list of image paths and prints one
"p_benign p_malicious" line per image can be explained. Here the "third
party" is a twelve-line script that calls an image malicious when its
center is dark.

    python demos/03_external_model.py
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from texp.classifier import ExternalClassifier
from texp.explainer import ExplainConfig, explain, segment_grid
from texp.imaging import ImageBuffer

SCRIPT = '''
import sys
from texp.imaging import read_image
for path in open(sys.argv[1]).read().split():
    px = read_image(path).pixels.astype(float)
    h, w = px.shape
    dark = 1 - px[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4].mean() / 255
    print(1 - dark, dark)
'''

with tempfile.TemporaryDirectory() as tmp:
    script = Path(tmp) / "center_model.py"
    script.write_text(SCRIPT)
    model = ExternalClassifier([sys.executable, str(script)], (16, 16, 1))

    px = np.full((16, 16), 230, np.uint8)
    px[4:12, 4:12] = 20
    image = ImageBuffer(px)
    seg = segment_grid(image, None, 4)
    ex = explain(image, None, model, ExplainConfig(cell=4, n_samples=200, seed=1), explained_class=1)

grid = ex.coefficients.reshape(4, 4)
print(f"p(malicious) = {ex.base_probability:.3f}; surrogate coefficients per 4x4 cell:")
for row in grid:
    print("  " + " ".join(f"{c:+.3f}" for c in row))
print(f"top cells: {ex.top_k} (the four central cells are 5, 6, 9 and 10)")
