use serde_json::{json, Value};

fn error_responses() -> Value {
    json!({
        "400": { "description": "Malformed request", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } },
        "502": { "description": "Inference backend failed", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } }
    })
}

fn with_errors(ok: Value) -> Value {
    let mut responses = error_responses();
    responses["200"] = ok;
    responses
}

fn json_body(schema: &str) -> Value {
    json!({ "required": true, "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } } })
}

fn json_ok(description: &str, schema: &str) -> Value {
    json!({ "description": description, "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } } })
}

pub fn document() -> Value {
    let session_id = json!([{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }]);
    let mut chat_responses = with_errors(json_ok("Assistant reply", "ChatReply"));
    chat_responses["404"] = json!({ "description": "Unknown session" });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "asmscribe", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/api/annotate": { "post": {
                "summary": "Annotate an assembly listing or answer a question",
                "requestBody": json_body("AnnotateRequest"),
                "responses": with_errors(json_ok("Annotation result", "AnnotationResult"))
            }},
            "/api/sessions": { "post": {
                "summary": "Open a chat session",
                "requestBody": { "required": false, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/NewSessionRequest" } } } },
                "responses": { "201": json_ok("Session created", "NewSession") }
            }},
            "/api/sessions/{id}": { "get": {
                "summary": "Session transcript",
                "parameters": session_id,
                "responses": { "200": json_ok("Session", "ChatSession"), "404": { "description": "Unknown session" } }
            }},
            "/api/sessions/{id}/chat": { "post": {
                "summary": "Send one chat message",
                "parameters": session_id,
                "requestBody": json_body("ChatRequest"),
                "responses": chat_responses
            }},
            "/api/health": { "get": {
                "summary": "Service and backend status",
                "responses": { "200": json_ok("Status", "Health") }
            }},
            "/api/models": { "get": {
                "summary": "Backend model list, passed through",
                "responses": with_errors(json!({ "description": "Backend /v1/models document" }))
            }}
        },
        "components": { "schemas": {
            "Error": { "type": "object", "required": ["error"], "properties": {
                "error": { "type": "string" }, "raw_response": { "type": "string" } } },
            "AnnotateRequest": { "type": "object", "required": ["code", "task"], "properties": {
                "code": { "type": "string", "description": "Listing, or question text for qa" },
                "task": { "type": "string", "enum": ["header", "inline", "intent", "complete", "qa"] },
                "model": { "type": "string" },
                "options": { "type": "object", "properties": {
                    "temperature": { "type": "number", "default": 0.2 },
                    "max_tokens": { "type": "integer", "default": 1024 },
                    "retries_on_malformed": { "type": "integer", "default": 2 } } } } },
            "AnnotationResult": { "type": "object", "required": ["task", "raw_response", "attempts"], "properties": {
                "task": { "type": "string", "enum": ["code_intent", "complete_the_code", "inline_comments", "header_comment", "qa"] },
                "text": { "type": "string" },
                "line_comments": { "type": "object", "additionalProperties": { "type": "string" },
                    "description": "1-based line number of `listing` to comment" },
                "raw_response": { "type": "string" },
                "attempts": { "type": "integer", "minimum": 1 },
                "dropped_keys": { "type": "integer" },
                "listing": { "type": "string", "description": "Text the model saw; line numbers refer to it" } } },
            "NewSessionRequest": { "type": "object", "properties": {
                "system": { "type": "string" }, "model": { "type": "string" } } },
            "NewSession": { "type": "object", "required": ["session_id", "created_at"], "properties": {
                "session_id": { "type": "string" }, "created_at": { "type": "integer" } } },
            "ChatRequest": { "type": "object", "required": ["message"], "properties": { "message": { "type": "string" } } },
            "ChatReply": { "type": "object", "required": ["reply"], "properties": { "reply": { "type": "string" } } },
            "ChatSession": { "type": "object", "required": ["session_id", "created_at", "model", "transcript"], "properties": {
                "session_id": { "type": "string" },
                "created_at": { "type": "integer" },
                "model": { "type": "string" },
                "transcript": { "type": "array", "items": { "type": "object", "properties": {
                    "role": { "type": "string", "enum": ["system", "user", "assistant"] },
                    "content": { "type": "string" } } } } } },
            "Health": { "type": "object", "required": ["status", "backend_reachable"], "properties": {
                "status": { "type": "string" },
                "backend_reachable": { "type": "boolean" },
                "embed_backend_reachable": { "type": "boolean" },
                "model": { "type": "string" } } }
        }}
    })
}
