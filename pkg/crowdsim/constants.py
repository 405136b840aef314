DEFAULT_SPEED = (1.2, 0.2)
DEFAULT_GROUP_SIZE = (5.0, 2.0)
MIN_SPEED = 0.3
# distance at which walls start pushing agents away
WALL_MARGIN = 0.4
WALL_GAIN = 1.0
GATE_TOLERANCE = 1e-6
GROUND_TRUTH_BANDWIDTH = 0.5
# rejection-sampling attempts per item in generate_random_map
PLACEMENT_TRIES = 1000
