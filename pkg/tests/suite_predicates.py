"""Hand-written predicates for every line of the shipped query suite.

Each entry is (query text, kind, predicates); predicates take a projected
state (see ``narrative_model.project``) and the dead-end flag.  Timeouts are
off on every instance these are used with, so ``anyTimeout`` is constant false.
"""

def all_terminated(s):
    return s.orc == "Terminated" and all(loc == "Terminated" for loc in s.svc)


def all_empty(s):
    return not any(s.o2s) and not any(s.s2o)


def suite(q: int) -> list:
    return [
        ("A[] (!deadlock || allTerminated)", "A[]",
         (lambda s, d: not d or all_terminated(s),)),
        ("A[] (allTerminated -> allEmpty())", "A[]",
         (lambda s, d: not all_terminated(s) or all_empty(s),)),
        ("E[] (allEmpty() && !orc.Timeout)", "E[]",
         (lambda s, d: all_empty(s) and s.orc != "Timeout",)),
        ("orc.Stop --> (allTerminated || anyTimeout)", "-->",
         (lambda s, d: s.orc == "Stop", lambda s, d: all_terminated(s))),
        ("E<> allTerminated", "E<>", (lambda s, d: all_terminated(s),)),
        ("A<> allTerminated", "A<>", (lambda s, d: all_terminated(s),)),
        ("E<> exists i: isFull(i)", "E<>",
         (lambda s, d: any(len(b) >= q for b in s.o2s),)),
        ("E[] !allTerminated", "E[]", (lambda s, d: not all_terminated(s),)),
        ("orc.CentralisedOffer --> orc.Start", "-->",
         (lambda s, d: s.orc == "CentralisedOffer", lambda s, d: s.orc == "Start")),
        ("A[] forall j: (svc(j).Terminated -> orc.Terminated)", "A[]",
         (lambda s, d: all(loc != "Terminated" for loc in s.svc) or s.orc == "Terminated",)),
        ("E<> svc(0).SendRequest", "E<>", (lambda s, d: s.svc[0] == "SendRequest",)),
        ("A<> orc.Start", "A<>", (lambda s, d: s.orc == "Start",)),
        ("E[] !orc.Start", "E[]", (lambda s, d: s.orc != "Start",)),
        ("svc(0).SendOffer --> svc(0).Ready", "-->",
         (lambda s, d: s.svc[0] == "SendOffer", lambda s, d: s.svc[0] == "Ready")),
        ("A[] (orc.Start -> allEmpty())", "A[]",
         (lambda s, d: s.orc != "Start" or all_empty(s),)),
    ]
