from .scenario import (
    ScenarioConfig,
    ScenarioError,
    add_scenario_config,
    get_scenario_config,
    list_scenarios,
    load_scenario,
    parse_scenario,
)
from .simulator import (
    Phase,
    WorldState,
    generate_random_map,
    ground_truth_grid,
    initial_world,
    observe,
    run,
    schedule_activations,
    step,
    write_trajectory_csv,
)
