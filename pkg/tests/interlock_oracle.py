"""Independent brute-force reference for the interlock algorithms.

Deliberately naive: plain dicts and lists, full rescans, no sharing with
the production implementation. Used to cross-check ownership and queue
traces event by event.
"""

from __future__ import annotations

FAULT = "fault"


class OracleInterlock:
    def __init__(self, resources, priorities):
        self.O = {r: None for r in resources}
        self.Q = []  # dicts: op_id, wanted, p, token
        self.P = dict(priorities)

    def acquire(self, op_id, wanted, token):
        """Returns token if granted now, else None."""
        if all(self.O[r] is None for r in wanted):
            for r in wanted:
                self.O[r] = op_id
            return token
        if not any(q["op_id"] == op_id for q in self.Q):
            self.Q.append({"op_id": op_id, "wanted": tuple(wanted),
                           "p": self.P[op_id], "token": token})
        return None

    def release(self, op_id):
        """Returns list of tokens granted from the queue, in grant order."""
        for r in list(self.O):
            if self.O[r] == op_id:
                self.O[r] = None
        granted = []
        self.Q.sort(key=lambda q: -q["p"])
        for q in list(self.Q):
            if all(self.O[r] is None for r in q["wanted"]):
                for r in q["wanted"]:
                    self.O[r] = q["op_id"]
                self.Q.remove(q)
                granted.append(q["token"])
        return granted

    def fault(self, op_id):
        for r in list(self.O):
            if self.O[r] == op_id:
                self.O[r] = FAULT
        return []

    def clear_fault(self, resource):
        if self.O[resource] != FAULT:
            raise ValueError(f"{resource} not faulted")
        self.O[resource] = None
        # same re-evaluation as a release event
        granted = []
        self.Q.sort(key=lambda q: -q["p"])
        for q in list(self.Q):
            if all(self.O[r] is None for r in q["wanted"]):
                for r in q["wanted"]:
                    self.O[r] = q["op_id"]
                self.Q.remove(q)
                granted.append(q["token"])
        return granted

    def snapshot(self):
        return {
            "O": dict(self.O),
            "Q": sorted(((q["op_id"], tuple(q["wanted"]), q["p"]) for q in self.Q),
                        key=lambda t: -t[2]),
        }
