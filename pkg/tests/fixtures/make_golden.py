"""Regenerate golden.json from first principles.

Pure standard library on purpose: nothing here imports numpy or the
package under test, so the frozen values are an independent oracle.

    python tests/fixtures/make_golden.py
"""

import json
import math
from fractions import Fraction
from pathlib import Path


def decay_mask(n, gamma):
    return [[float(gamma ** (i - j)) if i >= j else 0.0 for j in range(n)] for i in range(n)]


def retention_by_sum(q, k, v, gamma):
    """o_n = sum_{m<=n} gamma^(n-m) (q_n . k_m) v_m, scalar head."""
    out = []
    for n in range(len(q)):
        out.append(float(sum(gamma ** (n - m) * q[n] * k[m] * v[m] for m in range(n + 1))))
    return out


def retention_by_recurrence(q, k, v, gamma):
    s, out = Fraction(0), []
    for qn, kn, vn in zip(q, k, v):
        s = gamma * s + kn * vn
        out.append(float(qn * s))
    return out


def swish(x):
    return x / (1.0 + math.exp(-x))


def gelu_tanh(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def main():
    half = Fraction(1, 2)
    q = k = [Fraction(1), Fraction(1)]
    v = [Fraction(2), Fraction(3)]
    by_sum = retention_by_sum(q, k, v, half)
    assert by_sum == retention_by_recurrence(q, k, v, half)
    golden = {
        "decay_mask_3_0.5": decay_mask(3, half),
        "decay_mask_1_0.7": decay_mask(1, Fraction(7, 10)),
        "worked_retention": by_sum,
        "head_gammas_1": [float(1 - Fraction(1, 2 ** (5 + i))) for i in range(1)],
        "head_gammas_3": [float(1 - Fraction(1, 2 ** (5 + i))) for i in range(3)],
        "swish_1": swish(1.0),
        "gelu_1": gelu_tanh(1.0),
        "gelu_10": gelu_tanh(10.0),
        "softmax_ln1_ln3": [1 / (1 + 3), 3 / (1 + 3)],
        "layer_norm_3_5": [-1.0, 1.0],
        "ln_16": math.log(16),
    }
    path = Path(__file__).with_name("golden.json")
    path.write_text(json.dumps(golden, indent=2) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
