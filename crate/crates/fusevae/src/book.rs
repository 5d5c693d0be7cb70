// Book chapters are attached as doc-tested modules; see book.rs once chapters exist.
