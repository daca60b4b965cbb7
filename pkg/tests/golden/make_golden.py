"""Regenerate the WFDB golden files with the reference reader (``pip install wfdb``).

    python tests/golden/make_golden.py data/mitdb
"""
import json
import os
import sys
from collections import Counter

import wfdb

BEAT_SYMBOLS = set("NLRaVFJASEjQBenfr/")


def main(data_dir):
    here = os.path.dirname(os.path.abspath(__file__))
    for rec in ("100", "101"):
        stem = os.path.join(data_dir, rec)
        if not os.path.exists(stem + ".hea"):
            continue
        r = wfdb.rdrecord(stem, physical=False)
        a = wfdb.rdann(stem, "atr")
        beats = [(int(s), y) for s, y in zip(a.sample, a.symbol) if y in BEAT_SYMBOLS]
        golden = {
            "reference": f"wfdb-python {wfdb.__version__}",
            "record": rec,
            "num_signals": r.n_sig,
            "sampling_frequency": r.fs,
            "num_samples": r.sig_len,
            "gain": list(r.adc_gain),
            "baseline": list(r.baseline),
            "comments": r.comments,
            "first_samples": r.d_signal[:20].tolist(),
            "last_samples": r.d_signal[-5:].tolist(),
            "annotation_count_all": len(a.sample),
            "beat_annotation_count": len(beats),
            "beat_symbol_counts": dict(sorted(Counter(y for _, y in beats).items())),
            "first_beats": beats[:20],
        }
        with open(os.path.join(here, f"mitdb_{rec}.json"), "w") as fh:
            json.dump(golden, fh, indent=1)
            fh.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mitdb")
