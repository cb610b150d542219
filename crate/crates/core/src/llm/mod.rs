//! LLM backend plumbing: HTTP transport, prompt rendering and response parsing.

pub mod client;
pub mod parse;
pub mod prompts;

pub use client::{
    ChatClient, ChatTransport, EndpointConfig, HttpResponse, LlmError, OfflineTransport, RequestLimiter,
    TransportError, UreqTransport, API_KEY_ENV,
};
pub use parse::{parse_meta_response, parse_meta_response_for, serialize_meta_response, DimensionScore, MetaResponse, ParseError};
pub use prompts::{render_meta_prompt, render_participant_prompt, MetaPromptInput, MetaTask, PromptError};
