// Trains a small model on the synthetic world and drafts reports for a few
// test samples, once directly and once through the agent pipeline.

#include <cstdio>
#include <iostream>

#include "nsmrg/nsmrg.hpp"

int main() {
    using namespace nsmrg;
    TrainConfig cfg;
    cfg.dims.width = 64;
    cfg.dims.embed = 64;
    cfg.dims.ffn = 256;
    cfg.dims.hidden = 512;
    cfg.n_train = 1000;
    cfg.n_test = 40;
    cfg.epochs = 8;

    const SyntheticWorld w = make_world(cfg);
    TrainHooks hooks;
    hooks.on_record = [](const MetricsRecord& m) {
        std::printf("epoch %zu  loss %.4f  macro-F1 %.3f  rule AUC %.3f\n", m.epoch, m.loss, m.macro_f1, m.rule_auc);
    };
    const TrainResult r = train_loop(w, cfg, hooks);

    const auto opts = inference_options(cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto res = run_inference(r.model, w.templates, w.test[i].x, nullptr, opts);
        std::cout << "sample " << w.test[i].id << ": " << res.draft.text() << '\n';
        for (const auto& f : res.draft.flags)
            std::cout << "  contradicts exemplar " << f.exemplar << " in clause " << f.clause << '\n';
    }

    KnowledgeGraph kg = KnowledgeGraph::parse(world_kg_text());
    AgentSystem agents(r.model, w.templates, nullptr, kg, {});
    const PipelineResult p = agents.run(w.test[0].x);
    std::cout << "agents: " << p.draft.text() << " (confidence " << p.draft.confidence << ")\n";
    for (const auto& rec : agents.bus().audit())
        std::cout << "  " << rec.event << ' ' << rec.sender << " -> " << rec.recipient << '\n';
}
