# Module to share resources between different parts - allocators, harness runs and exporters
# BASELINE_RUNS: per-step rates of baseline runs, keyed by (config fingerprint, seed)
# PRETRAINED: offline-trained agent parameters, keyed by (scenario, seed)
# ORACLE_SEARCHES: brute-force results, keyed by scenario

GLOBAL_SHARED_STATE = {"BASELINE_RUNS": {}, "PRETRAINED": {}, "ORACLE_SEARCHES": {}}
