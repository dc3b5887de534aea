"""Exhaustively check the small three-service desk model.

Shows a property that holds, then shrinks the buffers until the same
property breaks and prints the counterexample trace.
"""

from carecheck.checker import check_query, evidence_text
from carecheck.cli import data_dir
from carecheck.protocol import load_params

DEADLOCK = "A[] (!deadlock || allTerminated)"

params = load_params(data_dir() / "desk-small.params")
print(f"{params.n_services} services, buffers of {params.queue_size}")

orphans = check_query(params, "A[] (allTerminated -> allEmpty())")
print(orphans.to_record())

# two cells are not enough for the three compatibility-check messages
tight = params.with_(queue_size=2)
v = check_query(tight, DEADLOCK)
print(v.to_record())
print(evidence_text(v))
