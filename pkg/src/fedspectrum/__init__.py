"""Multi-agent deep RL for joint channel access and power control in interference networks."""
