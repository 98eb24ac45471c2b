#include "wilke/toy_kb.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

namespace wilke {

namespace {

std::vector<ToyRelation> base_relations() {
  return {
      {"R0", {"the home of {}", "the city of {}", "where lives {}"}, {"A", "B", "C", "D"}},
      {"R1", {"the job of {}", "the work of {}", "what works {}"}, {"E", "F", "G", "H"}},
      {"R2", {"the language of {}", "the tongue of {}", "what speaks {}"}, {"I", "J", "K", "L"}},
      {"R3", {"the favorite of {}", "the love of {}", "what likes {}"}, {"M", "N", "O", "P"}},
  };
}

// Objects reserved for held-out facts; none is ever a training target.
const std::vector<std::vector<std::string>> kHeldOutObjects{{"Q", "R"}, {"S", "T"}, {"U", "V"}, {"W", "X"}};

std::string random_subject(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> letter('a', 'z');
  std::string s(4, 'a');
  for (auto& c : s) c = static_cast<char>(letter(rng));
  return s;
}

std::vector<KnowledgeRecord> to_records(const ToyKb& kb, const std::vector<Fact>& facts, std::int64_t first_id,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x7a26e7ull);
  std::vector<KnowledgeRecord> out;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const Fact& f = facts[i];
    const ToyRelation& rel = kb.relations[f.relation];
    KnowledgeRecord r;
    r.case_id = first_id + static_cast<std::int64_t>(i);
    r.prompt = rel.templates.front();
    r.subject = f.subject;
    r.target_true = f.object;
    r.relation_id = rel.id;
    std::vector<std::string> others;
    for (const auto& o : rel.objects)
      if (o != f.object) others.push_back(o);
    r.target_new = others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)];
    for (std::size_t t = 1; t < rel.templates.size(); ++t) r.paraphrase_prompts.push_back(fill_subject(rel.templates[t], f.subject));
    for (const auto& g : facts)
      if (&g != &f && g.relation == f.relation && g.object == f.object)
        r.neighborhood_prompts.push_back(fill_subject(rel.templates.front(), g.subject));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::vector<KnowledgeRecord> ToyKb::records(std::uint64_t seed) const { return to_records(*this, facts, 0, seed); }

std::vector<KnowledgeRecord> ToyKb::held_out_records(std::uint64_t seed) const {
  return to_records(*this, held_out, 10000, seed);
}

ToyKb make_toy_kb(std::uint64_t seed, int n_facts, int n_held_out) {
  if (n_facts < 16 || n_facts % 16 != 0) throw ValidationError("toy kb: n_facts must be a positive multiple of 16");
  if (n_held_out < 0 || n_held_out % 4 != 0) throw ValidationError("toy kb: n_held_out must be a multiple of 4");
  ToyKb kb;
  kb.relations = base_relations();
  std::mt19937_64 rng(seed);
  std::set<std::string> used;
  auto fresh = [&] {
    for (;;) {
      auto s = random_subject(rng);
      if (used.insert(s).second) return s;
    }
  };
  // Every subject has one fact per relation; within a relation each object is
  // held by the same number of subjects.
  const int n_subjects = n_facts / 4;
  std::vector<std::string> subjects;
  for (int i = 0; i < n_subjects; ++i) subjects.push_back(fresh());
  for (int r = 0; r < 4; ++r) {
    std::vector<int> objs;
    for (int i = 0; i < n_subjects; ++i) objs.push_back(i % 4);
    std::shuffle(objs.begin(), objs.end(), rng);
    for (int i = 0; i < n_subjects; ++i) kb.facts.push_back({subjects[i], r, kb.relations[r].objects[objs[i]]});
  }
  std::shuffle(kb.facts.begin(), kb.facts.end(), rng);
  std::string held;
  for (int i = 0; i < n_held_out; ++i) {
    if (i % 4 == 0) held = fresh();
    const int r = i % 4;
    kb.held_out.push_back({held, r, kHeldOutObjects[r][(i / 4) % 2]});
  }
  return kb;
}

Tokenizer toy_tokenizer(const ToyKb& kb) {
  const auto& b2u = byte_to_unicode();
  std::set<std::string> words;
  auto add_text = [&](const std::string& text) {
    for (const auto& w : Tokenizer::pretokenize(text)) {
      std::string mapped;
      for (unsigned char c : w) mapped += b2u[c];
      words.insert(mapped);
    }
  };
  add_text(". ");
  for (const auto* facts : {&kb.facts, &kb.held_out})
    for (const auto& f : *facts)
      for (const auto& t : kb.relations[f.relation].templates) add_text(fill_subject(t, f.subject) + " " + f.object);
  for (const auto& objs : kHeldOutObjects)
    for (const auto& o : objs) add_text(" " + o);
  for (const auto& r : kb.relations)
    for (const auto& o : r.objects) add_text(" " + o);

  std::unordered_map<std::string, Token> vocab;
  for (int b = 0; b < 256; ++b) vocab.emplace(b2u[b], b);
  std::vector<std::pair<std::string, std::string>> merges;
  // Adding a merge at the end never changes words that already encode to one
  // piece, so growing word by word converges.
  for (const auto& w : words) {
    for (;;) {
      const auto pieces = Tokenizer(vocab, merges).bpe_word(w);
      if (pieces.size() == 1) break;
      merges.emplace_back(pieces[0], pieces[1]);
      vocab.emplace(pieces[0] + pieces[1], static_cast<Token>(vocab.size()));
    }
  }
  return Tokenizer(std::move(vocab), std::move(merges));
}

ModelConfig toy_model_config(const Tokenizer& tok) {
  ModelConfig c;
  c.vocab_size = tok.vocab_size();
  c.max_seq = 32;
  c.tokenizer_mode = tok.is_bpe() ? TokenizerMode::bpe : TokenizerMode::byte;
  return c;
}

std::vector<std::pair<std::string, std::string>> training_pairs(const ToyKb& kb) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : kb.facts)
    for (const auto& t : kb.relations[f.relation].templates) out.emplace_back(fill_subject(t, f.subject), f.object);
  return out;
}

namespace {

struct Example {
  Tokens seq;
  std::vector<int> positions;
  Tokens targets;
  Tokens prompt, target;
};

std::vector<float*> tensor_ptrs(ModelF& m, std::vector<std::size_t>* sizes = nullptr) {
  std::vector<float*> out;
  m.for_each_tensor(ModelF::TensorVisitor([&](const std::string&, const std::vector<std::int64_t>& shape, float* data) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    out.push_back(data);
    if (sizes) sizes->push_back(n);
  }));
  return out;
}

/// `e` preceded by the full sentence of `other` and a separator, as irrelevant context.
Example with_context(const Example& e, const Example& other, const Tokens& sep, int max_seq) {
  Tokens ctx = other.prompt;
  ctx.insert(ctx.end(), other.target.begin(), other.target.end());
  ctx.insert(ctx.end(), sep.begin(), sep.end());
  if (static_cast<int>(ctx.size() + e.seq.size()) > max_seq) return e;
  Example out;
  out.prompt = ctx;
  out.prompt.insert(out.prompt.end(), e.prompt.begin(), e.prompt.end());
  out.target = e.target;
  out.targets = e.targets;
  out.seq = ctx;
  out.seq.insert(out.seq.end(), e.seq.begin(), e.seq.end());
  for (int p : e.positions) out.positions.push_back(p + static_cast<int>(ctx.size()));
  return out;
}

}  // namespace

ModelF train_toy_kb(const ModelConfig& config, const ToyKb& kb, const Tokenizer& tok, const TrainConfig& train,
                    TrainReport* report) {
  config.validate();
  if (config.vocab_size < tok.vocab_size()) throw ValidationError("toy kb: vocab_size smaller than the tokenizer");
  if (train.batch < 1 || train.max_epochs < 1 || train.check_every < 1) throw ValidationError("train: bad budget");
  const Tokens sep = tok.encode(". ");
  std::vector<Example> data;
  for (const auto& [prompt, object] : training_pairs(kb)) {
    Example e;
    e.prompt = tok.encode(prompt);
    e.target = target_tokens(tok, object);
    e.seq = e.prompt;
    e.seq.insert(e.seq.end(), e.target.begin(), e.target.end() - 1);
    for (std::size_t k = 0; k < e.target.size(); ++k) e.positions.push_back(static_cast<int>(e.prompt.size() + k) - 1);
    e.targets = e.target;
    if (static_cast<int>(e.seq.size()) > config.max_seq) throw ValidationError("toy kb: prompt exceeds max_seq");
    data.push_back(std::move(e));
  }

  ModelF model = ModelF::random(config, train.seed, train.init_std);
  ModelF m1 = ModelF::zeros(config), m2 = ModelF::zeros(config);
  for (auto* mm : {&m1, &m2}) {
    for (auto& b : mm->blocks) b.ln1_w.setZero(), b.ln2_w.setZero();
    mm->lnf_w.setZero();
  }
  std::vector<std::size_t> sizes;
  const auto p = tensor_ptrs(model, &sizes);
  const auto pm = tensor_ptrs(m1), pv = tensor_ptrs(m2);

  std::mt19937_64 rng(train.seed ^ 0x7a41ull);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long t = 0;
  TrainReport rep;
  auto all_match = [&] {
    return std::all_of(data.begin(), data.end(), [&](const Example& e) { return teacher_forced_match(model, e.prompt, e.target); });
  };
  for (int epoch = 1; epoch <= train.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train.batch));
      std::optional<ModelF> grad;
      for (std::size_t i = start; i < end; ++i) {
        Example e = data[order[i]];
        if (std::bernoulli_distribution(train.context_prob)(rng)) {
          const Example& other = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
          e = with_context(e, other, sep, config.max_seq);
        }
        const auto cache = forward_cached(model, e.seq);
        MatrixF dlogits = MatrixF::Zero(cache.logits.rows(), cache.logits.cols());
        epoch_loss += nll_loss<float>(e.positions, e.targets)(cache.logits, dlogits);
        auto g = backward(model, cache, dlogits, {}, true);
        if (!grad) {
          grad = std::move(*g.params);
        } else {
          const auto dst = tensor_ptrs(*grad);
          const auto src = tensor_ptrs(*g.params);
          for (std::size_t k = 0; k < dst.size(); ++k)
            for (std::size_t j = 0; j < sizes[k]; ++j) dst[k][j] += src[k][j];
        }
      }
      const auto pg = tensor_ptrs(*grad);
      const double scale = 1.0 / static_cast<double>(end - start);
      double sq = 0;
      for (std::size_t k = 0; k < pg.size(); ++k)
        for (std::size_t j = 0; j < sizes[k]; ++j) sq += static_cast<double>(pg[k][j]) * pg[k][j] * scale * scale;
      const double clip = std::min(1.0, 1.0 / std::max(std::sqrt(sq), 1e-12));
      ++t;
      const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
      for (std::size_t k = 0; k < p.size(); ++k) {
        for (std::size_t j = 0; j < sizes[k]; ++j) {
          const double g = pg[k][j] * scale * clip;
          pm[k][j] = static_cast<float>(b1 * pm[k][j] + (1 - b1) * g);
          pv[k][j] = static_cast<float>(b2 * pv[k][j] + (1 - b2) * g * g);
          p[k][j] -= static_cast<float>(train.learning_rate * (pm[k][j] / c1) / (std::sqrt(pv[k][j] / c2) + eps));
        }
      }
    }
    if (!std::isfinite(epoch_loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
    rep.epochs = epoch;
    rep.final_loss = epoch_loss / static_cast<double>(data.size());
    if (epoch % train.check_every == 0 && rep.final_loss < train.target_loss && all_match()) {
      rep.converged = true;
      break;
    }
  }
  if (report) *report = rep;
  if (!rep.converged)
    throw NumericError("train: not all facts memorized after " + std::to_string(rep.epochs) + " epochs");
  return model;
}

}  // namespace wilke
