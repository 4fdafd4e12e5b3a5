"""Smoke test for the cdmsc_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python python/smoke_test.py
"""

import math

import cdmsc_py as c


def main():
    assert c.parse_clip_name("S_3_D_2_0417.wav") == (3, 2, 417)
    assert c.frame_count(16000) == 200

    # Two seconds of a 600 Hz tone at 16 kHz through the full front end.
    tone = [0.3 * math.sin(2 * math.pi * 600 * i / 16000) for i in range(32000)]
    down = c.resample(tone, 16000, 8000)
    assert len(down) == 16000
    assert max(abs(v) for v in c.peak_normalize(down)) == 1.0
    feats = c.extract_features(tone, 16000)
    assert len(feats) == 200 and len(feats[0]) == 64
    assert len(c.logmel(down)) == 200

    truth = [0, 0, 1, 1, 2]
    pred = [0, 1, 1, 1, 0]
    assert c.confusion(truth, pred, 3) == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
    assert abs(c.balanced_accuracy(truth, pred, 3) - 0.5) < 1e-12
    assert abs(c.balanced_accuracy(truth, pred, 4, "zero_score") - 0.375) < 1e-12
    assert abs(c.dsg(0.8806, 0.1751) - 0.7055) < 1e-12

    names = [f"S_{s}_D_1_{i}" for s in (1, 2) for i in range(20)]
    roles = dict(c.split(names, 0.1, 42))
    assert sum(r == "validation" for r in roles.values()) == 4
    assert roles == dict(c.split(names, 0.1, 42))

    clip = c.synth_clip(400.0, 0.5, sample_rate_hz=8000, harmonics=1, seed=7)
    assert len(clip) == 4000
    assert clip == c.synth_clip(400.0, 0.5, sample_rate_hz=8000, harmonics=1, seed=7)

    lo, hi = c.PARAM_BUDGET
    m = c.Model(seed=42)
    assert lo <= m.param_count <= hi, m.param_count
    assert "species" in m.describe()
    species, domains = m.logits([feats, feats[:120]])
    assert len(species) == 2 and len(species[0]) == 9 and len(domains[0]) == 5
    s, d = m.predict([feats])
    assert 0 <= s[0] < 9 and 0 <= d[0] < 5

    try:
        c.parse_clip_name("not_a_clip.wav")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed name accepted")

    print(f"cdmsc_py smoke test passed ({m.param_count} parameters)")


if __name__ == "__main__":
    main()
