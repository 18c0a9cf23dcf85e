#ifndef MULTIFUSE_TEST_FIXTURES_HPP
#define MULTIFUSE_TEST_FIXTURES_HPP

#include <cmath>

#include "multifuse/fusion_model.hpp"
#include "multifuse/rng.hpp"

namespace multifuse::testing {

inline ModelConfig tiny_config()
{
    auto vol = BranchConfig::volume();
    vol.input_shape = {8, 8, 8};
    vol.conv_channels = {2, 2, 3, 3, 4, 4};
    vol.dense_widths = {8, 6, 5};
    vol.latent_dim = 4;
    auto fn = BranchConfig::func();
    fn.n_nodes = 6;
    fn.graph_widths = {3, 4};
    fn.latent_dim = 4;
    auto st = BranchConfig::structural();
    st.n_nodes = 6;
    st.graph_widths = {3, 4};
    st.latent_dim = 4;
    ModelConfig m{{vol, fn, st}, {}};
    m.head.hidden = {8, 5};
    return m;
}

template <class T>
SubjectInput<T> random_input(const ModelConfig& m, Rng& rng)
{
    Tensor<T> gm, fnc, sc;
    if (auto b = m.find(BranchKind::Volume)) {
        gm = Tensor<T>(Shape{b->input_shape[0], b->input_shape[1], b->input_shape[2]});
        for (auto& v : gm.data()) v = static_cast<T>(rng.uniform());
    }
    if (auto b = m.find(BranchKind::FuncGraph)) {
        const std::size_t n = b->n_nodes;
        fnc = Tensor<T>(Shape{n, n}, T(1));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                fnc[i * n + j] = fnc[j * n + i] = static_cast<T>(rng.uniform(-1, 1));
    }
    if (auto b = m.find(BranchKind::StructGraph)) {
        const std::size_t n = b->n_nodes;
        sc = Tensor<T>(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                sc[i * n + j] = sc[j * n + i] = static_cast<T>(std::floor(rng.uniform(0, 5000)));
    }
    return prepare_input(gm, fnc, sc);
}

} // namespace multifuse::testing

#endif
