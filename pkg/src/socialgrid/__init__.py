"""Multi-agent gridworld laboratory with a self-contained training stack.

Subpackages / modules:
  gridworld -- grid engine: movement, occlusion, egocentric rendering, prestige
  tasks     -- Goal Cycle / Four Rooms / Maze generators and reward rules
  autodiff  -- tape-based reverse-mode autodiff over dense numpy tensors
  nets      -- agent network (conv + FC + LSTM trunk, policy/value/aux heads)
  rollout   -- episode collection, GAE, hidden-state refresh, window sampling
  train     -- PPO-clip losses, KL-guarded update loop, behavior cloning
  expcli    -- experiment command line: training, transfer eval, diagnostics
"""

__version__ = "0.1.0"
