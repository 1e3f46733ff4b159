#include "p3t/gradcheck.hpp"

#include "p3t/encoders.hpp"
#include "p3t/losses.hpp"
#include "p3t/point_prompter.hpp"
#include "p3t/synthdata.hpp"
#include "p3t/text_prompter.hpp"

namespace p3t::train {

std::vector<TermReport> micro_gradient_check(const MicroInstanceOptions& opts) {
  std::vector<std::string> names(data::family_names().begin(),
                                 data::family_names().begin() + static_cast<std::ptrdiff_t>(opts.categories));
  enc::FrozenModel model(enc::micro_config(opts.width, names), derive_seed(opts.seed, 1));
  model.freeze();

  const std::size_t n = opts.patches;
  const std::size_t k = opts.patch_points;
  std::vector<prompt::FrozenFeatures> feats;
  for (std::size_t c = 0; c < names.size(); ++c) {
    Rng rng(derive_seed(opts.seed, 2, c));
    auto spec = data::draw_spec(data::parse_family(names[c]), {}, n * k, rng);
    feats.push_back(prompt::extract_features(data::generate_shape(spec, rng), model, n, k));
  }
  std::vector<ad::Tensor> z;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < feats.size(); ++c) {
    z.push_back(feats[c].embedding);
    labels.push_back(c);
  }
  const loss::PrototypeBank bank = loss::compute_prototypes(z, labels, names);

  prompt::PrompterConfig pc;
  pc.feature_dim = opts.width;
  pc.offset_dim = opts.width;
  pc.offset_hidden = opts.width;
  pc.patch_points = k;
  pc.graph_k = 3;
  pc.refine_m = 3;
  pc.transformer_heads = 2;
  // Non-zero heads so every group, and the geometric hinge, carries gradient.
  pc.head_init = 0.5;
  prompt::PointPrompter prompter(pc, derive_seed(opts.seed, 3));
  text::ContextVectors context(model, model.config().template_len, 0.05, derive_seed(opts.seed, 4));
  text::HandcraftedCache hand(model, names);

  const std::size_t label = 0;
  const auto& ff = feats[label];
  const loss::SoftThresholds soft = loss::soft_thresholds(ff.patches, ff.thresholds.global_centroid);
  Rng sel_rng(0);
  const auto targets = prompt::select_targets(ff.scores, 0.5, prompt::Strategy::vulnerable, sel_rng).indices;

  auto parts = [&] {
    auto r = prompt::prompted_forward(ff, model, prompter, targets);
    ad::Tensor w = text::prompted_embeddings(model, names, context.matrix());
    loss::LossParts p;
    p.ce = loss::ce_from_logits(enc::similarity_logits(r.embedding, w, model.tau()), label);
    p.proto = loss::proto_loss(r.embedding, bank, label);
    p.reg = loss::reg_loss(r.deformed_points, k, soft);
    p.con = loss::con_loss(hand.embeddings(), w);
    return p;
  };
  const loss::LossWeights weights{1.0, 1.0, 1.0};

  std::vector<ad::Parameter> params;
  for (const auto& p : prompter.store().params()) params.push_back(p);
  for (const auto& p : context.store().params()) params.push_back(p);

  const std::vector<std::pair<std::string, std::function<ad::Tensor()>>> terms{
      {"ce", [&] { return parts().ce; }},
      {"proto", [&] { return parts().proto; }},
      {"reg", [&] { return parts().reg; }},
      {"con", [&] { return parts().con; }},
      {"total", [&] { return loss::total_loss(parts(), weights); }},
  };
  std::vector<TermReport> out;
  for (const auto& [name, f] : terms) {
    TermReport t;
    t.term = name;
    {
      ad::NoGradGuard g;
      t.value = f().item();
    }
    t.report = ad::grad_check(f, params, opts.h, opts.max_per_param);
    out.push_back(std::move(t));
  }
  ad::zero_grad(params);
  return out;
}

}  // namespace p3t::train
