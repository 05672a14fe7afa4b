// Minimal tour: synthesise one night of signals, push a crop through the
// small-window encoder, roll the epoch embeddings through the sequence
// encoder, and print what falls out. Runs in well under a minute.

#include <iostream>

#include "somnus/cohort.hpp"
#include "somnus/macro.hpp"
#include "somnus/micro.hpp"

using namespace somnus;

int main() {
    GeneratorConfig gen;
    gen.min_epochs = 120;
    gen.max_epochs = 120;
    RawRecord raw = generate_record(/*cohort_seed=*/1, /*index=*/0, gen);
    StandardRecord rec = standardize(raw);
    std::cout << "record " << rec.id << ": " << rec.epochs << " epochs, age "
              << rec.demo.age << ", sex " << sex_name(rec.demo.sex) << ", bmi "
              << rec.demo.bmi << "\n";

    std::array<const char*, 5> stage_names{"W", "N1", "N2", "N3", "REM"};
    std::cout << "first ten epochs:";
    for (std::size_t e = 0; e < 10; ++e)
        std::cout << " " << stage_names[static_cast<std::size_t>(rec.stages[e])];
    std::cout << "\n";

    MicroConfig mc = MicroConfig::tiny();
    MicroModel micro(mc, /*seed=*/1);
    Rng rng(7);
    MicroExample crop = make_training_example(rec, /*start_epoch=*/4,
                                              /*crop_epochs=*/1, mc, rng);
    MicroOutput out = micro.forward({crop});
    MicroLosses losses = micro_losses(out, {crop}, mc);
    std::cout << "one masked crop -> recon " << losses.recon.item() << ", contrastive "
              << losses.contrastive.item() << ", koleo " << losses.koleo.item()
              << ", total " << losses.total.item() << "\n";

    auto rows = micro.epoch_embeddings(rec);
    std::cout << "night embeddings: " << rows.size() << " epochs x " << rows[0].size()
              << "\n";

    MacroConfig cc = MacroConfig::tiny();
    cc.in_dim = micro.embedding_dim();
    MacroModel macro(cc, /*seed=*/1);
    NoGrad ng;
    std::vector<double> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    Tensor emb = Tensor::from({static_cast<Index>(rows.size()),
                               static_cast<Index>(rows[0].size())},
                              std::move(flat));
    auto fwd = macro.forward(emb);
    Tensor subject = macro.subject_embedding(fwd);
    std::cout << "contextual states: [" << fwd.contextual.dim(0) << ", "
              << fwd.contextual.dim(1) << "], subject embedding: ["
              << subject.numel() << "]\n";
    std::cout << "subject embedding head:";
    for (Index k = 0; k < 4; ++k) std::cout << " " << subject.values()[k];
    std::cout << " ...\n";
    return 0;
}
