"""Feed hand-written mask distances to the early-stop detector.

    python demos/detector_stream.py 0.3 0.09 0.08 0.07 0.06 0.05

Each argument is one update (the same distance on both channels); the
counter resets whenever a value reaches gamma.
"""

import sys

from earlyrobust.ticket import ConvergenceDetector

values = [float(v) for v in sys.argv[1:]] or [0.3, 0.09, 0.08, 0.15, 0.07, 0.06, 0.05, 0.04, 0.03]
det = ConvergenceDetector(gamma=0.1, window=5)
for t, v in enumerate(values, 1):
    fired = det.observe(v, v)
    print(f"update {t}: distance {v:<6g} consecutive hits {det.consecutive_hits}" + ("  -> stop" if fired else ""))
    if fired:
        break
else:
    print("detector did not fire")
