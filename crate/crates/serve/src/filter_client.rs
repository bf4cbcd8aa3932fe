use std::time::Duration;

use serde::{Deserialize, Serialize};
use wpnav_core::episodes::{ClientError, FilterClient, FilterRequest};

/// Response document of a filter endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterResponse {
    pub response: String,
}

/// Posts each [`FilterRequest`] as JSON to a completion endpoint and reads
/// back a [`FilterResponse`].
pub struct HttpFilterClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpFilterClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { url: url.into(), agent }
    }
}

impl FilterClient for HttpFilterClient {
    fn complete(&self, request: &FilterRequest) -> Result<String, ClientError> {
        let resp = self.agent.post(&self.url).send_json(request).map_err(map_err)?;
        let doc: FilterResponse = resp.into_body().read_json().map_err(map_err)?;
        Ok(doc.response)
    }
}

fn map_err(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            ClientError::Timeout
        }
        other => ClientError::Unreachable(other.to_string()),
    }
}
