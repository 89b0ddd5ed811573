pub mod appliance;
pub mod channel;
pub mod feed;
pub mod http;
pub mod hub;
pub mod intent;
pub mod node;
pub mod protocol;
pub mod rng;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod trace;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/intents.md")]
    mod intents {}
    #[doc = include_str!("../../../book/src/star_network.md")]
    mod star_network {}
    #[doc = include_str!("../../../book/src/server.md")]
    mod server {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
