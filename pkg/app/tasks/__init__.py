# Per-node worker pool for local solves and synthesis