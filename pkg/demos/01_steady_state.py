"""
Steady state without a hypervisor
=================================

Run the shipped four-PCPU partitioning for ten simulated seconds and count
how often any monitor was entered. Then add a single shared-memory channel
and see what that costs.
"""

import json

import numpy as np

from questsim import builtin, load_scenario, run

sc = builtin("fig5")
print(sc.description)
for s in sc.sandboxes:
    print(f"  sandbox {s.id} {s.name:7s} pcpus={s.pcpus} mem={s.mem_bytes >> 20}MB devices={s.devices}")

trace = run(sc)
c = trace.counters
print("\nmonitor entries per sandbox:", c["monitor_entries"])
print("tlb flushes per sandbox:    ", c["tlb_flushes"])
print("interrupts delivered:", c["irqs_delivered"], " translations:", c["translations"])

# how busy each PCPU was, straight from the schedule records
busy = {}
for seg in trace.records["schedule"]:
    busy[seg["pcpu"]] = busy.get(seg["pcpu"], 0) + seg["time_end"] - seg["time_start"]
load = np.array([busy.get(p, 0) for p in range(sc.platform.pcpu_count)]) / sc.run.until_us
print("PCPU load:", np.round(load, 3))

# %% one channel at t = 1ms
doc = json.loads(sc.canonical_json())
doc["channels"] = [{"at_us": 1000, "a": 1, "b": 2, "ping_period_us": 10_000}]
with_chan = run(load_scenario(doc))
for t in with_chan.records["trap"]:
    print(f"t={t['time']}us sandbox {t['sandbox']}: {t['kind']} -> {t['resolution']} ({t['cost_ns']}ns)")
ch = with_chan.records["channel"][0]
print(f"channel {ch['id']}: HPA {ch['hpa_first']:#x}, GPA {ch['gpa_a']:#x} in sandbox 1, {ch['gpa_b']:#x} in sandbox 2")
print("monitor entries now:", with_chan.counters["monitor_entries"])
