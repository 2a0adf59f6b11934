// Ask for +10 g on section 2 of a live simulated line, apply the proposal, compare the measured gobs.
#include <iomanip>
#include <iostream>

#include "gobfeed/inversion.hpp"

using namespace gobfeed;

int main() {
    PlantConfig cfg;
    cfg.dirty_fraction = 0.0;
    cfg.outlier_fraction = 0.0;
    MachineState ms;
    ms.temperature_c = 1150;
    ms.master_speed = 7;
    Plant plant(cfg, 1, ms, 3);
    const auto before = plant.step(plant.current_cycle());

    InversionRequest req;
    req.initial_cycle = plant.current_cycle();
    req.machine_state = req.initial_cycle.machine_state;
    req.targets.assign(req.initial_cycle.size(), GobDelta{});
    req.targets[2] = {10.0, 0.0};

    const auto res = invert(SurrogateModel{}, req);
    std::cout << to_string(res.trace.verdict) << " after " << res.trace.steps.size() << " steps\n";
    const auto after = plant.step(res.cycle);

    std::cout << std::fixed << std::setprecision(2);
    for (std::size_t i = 0; i < after.size(); ++i) {
        const auto& a = req.initial_cycle.sections[i];
        const auto& b = res.cycle.sections[i];
        std::cout << "section " << i << "  sp " << a.sp << " -> " << b.sp << "  up " << a.up << " -> " << b.up
                  << "  weight " << before[i].weight_g << " -> " << after[i].weight_g << " g\n";
    }
}
