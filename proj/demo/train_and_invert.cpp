// Fit a small forward model on noise-free draws, then invert it for a two-section change.
#include <iostream>

#include "gobfeed/inversion.hpp"

using namespace gobfeed;

int main() {
    const auto train_set = sample_surrogate_dataset(SamplerConfig{}, 8000, 1);
    const auto val_set = sample_surrogate_dataset(SamplerConfig{}, 2000, 2);
    NetworkSpec spec;
    spec.dropout_rate = 0.0;
    TrainConfig tc;
    tc.max_epochs = 60;
    const auto model = train(Mlp::build(spec, 1), Dataset::from_samples(train_set), Dataset::from_samples(val_set), tc);
    const auto& best = model.history[model.best_epoch - 1];
    std::cout << spec.parameter_count() << " parameters, validation MAE " << best.val_mae[0] << " g, "
              << best.val_mae[1] << " mm\n";

    InversionRequest req;
    req.machine_state.temperature_c = 1180;
    req.machine_state.master_speed = 7;
    req.initial_cycle.machine_state = req.machine_state;
    req.initial_cycle.sections.assign(8, {65, 65, 148});
    req.targets.assign(8, GobDelta{});
    req.targets[1] = {8.0, -2.0};
    req.targets[5] = {-6.0, 0.0};

    const auto res = invert(model, req);
    std::cout << to_string(res.trace.verdict) << "\n";
    for (std::size_t i = 0; i < 8; ++i) {
        const auto& a = req.initial_cycle.sections[i];
        const auto& b = res.cycle.sections[i];
        const auto plant = surrogate_response(req.machine_state, {b.sp - a.sp, b.lp - a.lp, b.up - a.up});
        std::cout << "section " << i << ": model " << res.predictions[i].dw << " g / " << res.predictions[i].dl
                  << " mm, plant " << plant.dw << " g / " << plant.dl << " mm\n";
    }
}
