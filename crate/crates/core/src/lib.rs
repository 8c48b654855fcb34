pub mod manifest;
pub mod units;
pub mod values;
pub mod cache;
pub mod record;
pub mod registry;
pub mod resultsdb;
pub mod runner;
pub mod exemplars;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
    #[doc = include_str!("../../../book/src/units.md")]
    mod units {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/caching.md")]
    mod caching {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
    #[doc = include_str!("../../../book/src/registry.md")]
    mod registry {}
    #[doc = include_str!("../../../book/src/exemplars.md")]
    mod exemplars {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
