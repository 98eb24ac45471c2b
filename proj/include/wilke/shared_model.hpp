#pragma once

#include "wilke/model.hpp"

#include <memory>
#include <mutex>
#include <type_traits>
#include <utility>

namespace wilke {

/// Readers take immutable snapshots; a writer copies the current weights,
/// mutates the copy and publishes it. Snapshots taken before a write keep
/// seeing the old weights, so selector sweeps never race an edit.
class SharedModel {
 public:
  explicit SharedModel(ModelF model) : current_(std::make_shared<const ModelF>(std::move(model))) {}

  std::shared_ptr<const ModelF> snapshot() const {
    std::lock_guard lock(mu_);
    return current_;
  }

  /// Runs `fn(ModelF&)` on a private copy under the writer lock, then publishes it.
  template <typename Fn>
  decltype(auto) mutate(Fn&& fn) {
    std::lock_guard writer(write_mu_);
    auto next = std::make_shared<ModelF>(*snapshot());
    if constexpr (std::is_void_v<decltype(fn(*next))>) {
      fn(*next);
      publish(std::move(next));
    } else {
      auto result = fn(*next);
      publish(std::move(next));
      return result;
    }
  }

 private:
  void publish(std::shared_ptr<ModelF> next) {
    std::lock_guard lock(mu_);
    current_ = std::move(next);
  }

  mutable std::mutex mu_;
  std::mutex write_mu_;
  std::shared_ptr<const ModelF> current_;
};

}  // namespace wilke
